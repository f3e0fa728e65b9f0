import logging
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from .dataset_builder import AugmentedTile, extract_pixels
from .errors import GeoIoError, MissingTileError, ParseError
from .geo_io import RasterImage, TileRecord


class TileStore:
    """Tile directory holding one raw 8-bit RGB blob per tile_id.

    Blobs are stored row-major with the record's flip already applied; the
    dimensions come from the manifest window.
    """

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.logger = logging.getLogger(self.__class__.__name__)

    def path_for(self, tile_id: str) -> Path:
        return self.root / f"{tile_id}.rgb"

    def write(self, tile_id: str, pixels: np.ndarray) -> None:
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            np.ascontiguousarray(pixels, dtype=np.uint8).tofile(self.path_for(tile_id))
        except OSError as e:
            raise GeoIoError(f"Cannot write tile {tile_id}: {e}") from e

    def write_all(self, tiles: Iterable[AugmentedTile]) -> int:
        count = 0
        for tile in tiles:
            self.write(tile.record.tile_id, tile.pixels)
            count += 1
        self.logger.info(f"Stored {count} tiles in {self.root}")
        return count

    def read(self, record: TileRecord) -> np.ndarray:
        path = self.path_for(record.tile_id)
        if not path.exists():
            raise MissingTileError(record.tile_id)
        shape = (record.window.height, record.window.width, 3)
        try:
            data = np.fromfile(path, dtype=np.uint8)
        except OSError as e:
            raise GeoIoError(f"Cannot read tile {record.tile_id}: {e}") from e
        if data.size != shape[0] * shape[1] * 3:
            raise ParseError(f"Tile {record.tile_id} holds {data.size} bytes, expected {shape[0] * shape[1] * 3}")
        return data.reshape(shape)


class RasterTileSource:
    """Reads tile pixels straight out of an in-memory raster"""

    def __init__(self, raster: RasterImage):
        self.raster = raster

    def read(self, record: TileRecord) -> np.ndarray:
        return extract_pixels(self.raster, record.window, record.augmentation)
