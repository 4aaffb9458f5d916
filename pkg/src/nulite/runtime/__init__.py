"""Training loop, configuration, checkpoints and tiled inference."""
from .tiling import TileGrid, core_detection_f1, infer_tiled, plan_tiles, stitch

__all__ = ["TileGrid", "core_detection_f1", "infer_tiled", "plan_tiles", "stitch"]
