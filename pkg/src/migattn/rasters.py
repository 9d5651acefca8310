"""Binary PGM/PPM and TSV writers with byte-stable output."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# tab10, as 8-bit RGB
PALETTE = (
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189),
    (140, 86, 75), (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207),
)
BACKGROUND = (255, 255, 255)


def write_pgm(path: str | Path, image: np.ndarray) -> Path:
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("PGM expects a 2-D uint8 array")
    h, w = img.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())
    return path


def write_ppm(path: str | Path, image: np.ndarray) -> Path:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError("PPM expects an (h, w, 3) uint8 array")
    h, w, _ = img.shape
    path = Path(path)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())
    return path


def read_pnm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, dims, maxval, body = data.split(b"\n", 3)
    w, h = map(int, dims.split())
    if magic == b"P5":
        return np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    if magic == b"P6":
        return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    raise ValueError(f"unsupported magic {magic!r}")


def mask_image(mask: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)


def ownership_image(ownership: np.ndarray, n_instances: int) -> np.ndarray:
    """One gray level per id, spread over 1..255; 0 stays black."""
    if n_instances == 0:
        return np.zeros(ownership.shape, dtype=np.uint8)
    levels = np.zeros(n_instances + 1, dtype=np.uint8)
    levels[1:] = np.round(255 * np.arange(1, n_instances + 1) / n_instances).astype(np.uint8)
    return levels[ownership]


def color_preview(ownership: np.ndarray) -> np.ndarray:
    lut = np.array([BACKGROUND] + [PALETTE[(i - 1) % len(PALETTE)] for i in range(1, int(ownership.max(initial=0)) + 1)], dtype=np.uint8)
    return lut[ownership]


def write_tsv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path
