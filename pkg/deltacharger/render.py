"""Tactile frame images: PGM pair, green preview, ASCII heatmap"""

import logging
from pathlib import Path
from typing import List, Tuple

import cv2
import numpy as np
from PIL import Image

from deltacharger.contact import TactileFrame
from deltacharger.errors import IOFailure

logger = logging.getLogger(__name__)

MAX_FORCE = 9.0
PREVIEW_SCALE = 24
ASCII_RAMP = " .:-=+*#%@"


def to_gray(grid: np.ndarray) -> np.ndarray:
    """0 N -> black, 9 N -> 255"""
    return np.round(np.clip(grid, 0.0, MAX_FORCE) / MAX_FORCE * 255.0).astype(np.uint8)


def write_pgm_pair(frame: TactileFrame, out) -> Tuple[Path, Path]:
    out = Path(out)
    paths = (out.with_name(out.name + "_a.pgm"), out.with_name(out.name + "_b.pgm"))
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        for grid, path in zip(frame.sensors, paths):
            Image.fromarray(to_gray(grid)).save(path)
    except OSError as e:
        raise IOFailure(f"cannot write image {out}: {e}")
    return paths


def write_preview(frame: TactileFrame, out) -> Path:
    """Both sensors side by side, force in the green channel, upscaled with nearest neighbour"""
    path = Path(out).with_name(Path(out).name + "_pair.png")
    tiles = []
    for grid in frame.sensors:
        big = cv2.resize(to_gray(grid), None, fx=PREVIEW_SCALE, fy=PREVIEW_SCALE, interpolation=cv2.INTER_NEAREST)
        tiles.append(big)
    spacer = np.full((tiles[0].shape[0], PREVIEW_SCALE // 2), 40, dtype=np.uint8)
    green = np.hstack([tiles[0], spacer, tiles[1]])
    bgr = cv2.merge([np.zeros_like(green), green, np.zeros_like(green)])
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), bgr):
        raise IOFailure(f"cannot write preview {path}")
    return path


def ascii_heatmap(frame: TactileFrame) -> List[str]:
    steps = len(ASCII_RAMP) - 1
    lines = ["sensor A".ljust(14) + "sensor B"]
    for row_a, row_b in zip(frame.sensors[0], frame.sensors[1]):
        cells = []
        for row in (row_a, row_b):
            idx = np.round(np.clip(row, 0.0, MAX_FORCE) / MAX_FORCE * steps).astype(int)
            cells.append("".join(ASCII_RAMP[i] for i in idx))
        lines.append(f"|{cells[0]}|  |{cells[1]}|")
    return lines
