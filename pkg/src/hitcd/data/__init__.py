from .augment import (GeometricDraw, augment_geometric, color_jitter, corrupt_frame,
                      cutmix_temporal, insert_event)
from .preprocess import cut_tiles, normalize, select_bands
from .raster import RasterError, decode_raster, encode_raster, read_raster, write_raster
from .series import (BANDS, EventMap, SeriesBatch, TileSeries, collate, dataset_hash,
                     read_dataset, read_series, write_dataset, write_series)
from .synth import GenConfig, grow_blob, synth_dataset, synth_series

__all__ = [
    "BANDS", "EventMap", "GenConfig", "GeometricDraw", "RasterError", "SeriesBatch",
    "TileSeries", "augment_geometric", "collate", "color_jitter", "corrupt_frame",
    "cut_tiles", "cutmix_temporal", "dataset_hash", "decode_raster", "encode_raster",
    "grow_blob", "insert_event", "normalize", "read_dataset", "read_raster", "read_series",
    "select_bands", "synth_dataset", "synth_series", "write_dataset", "write_raster",
    "write_series",
]
