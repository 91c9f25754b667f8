"""Discrete sources, a compositional renderer, and the on-disk dataset format.

The default world has four independent sources::

    0  object-x          8 values   column of the square
    1  object-y          8 values   row of the square
    2  object-hue        4 values   square colour
    3  background-hue    4 values   colour of every other pixel

Images are ``image_size x image_size`` RGB with a filled square of side
``ceil(image_size / 4)``. Palette entries are corners of the RGB cube: the
object palette is the tetrahedron {red, green, blue, white} and the background
palette is the complementary tetrahedron {black, cyan, magenta, yellow}. Each
palette is a maximally separated 4-point set in RGB, the two palettes never
share a colour (so the square is always visible), and every channel value is
0 or 1, which lets a Bernoulli decoder fit the pixels exactly.

Spaces with fewer than four sources use the leading roles and hold the rest
at 0, so a 2-source space renders a red square on black.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import RngStream

OBJECT_PALETTE = np.array(
    [[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]], dtype=np.float32
)
BACKGROUND_PALETTE = np.array(
    [[0, 0, 0], [0, 1, 1], [1, 0, 1], [1, 1, 0]], dtype=np.float32
)
ROLES = ("object-x", "object-y", "object-hue", "background-hue")
DEFAULT_CARDINALITIES = (8, 8, 4, 4)
DEFAULT_IMAGE_SIZE = 16
DEFAULT_CAP = 10**6
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """Malformed or inconsistent dataset directory."""


@dataclass(frozen=True)
class SourceSpace:
    cardinalities: tuple[int, ...]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        cards = tuple(int(c) for c in self.cardinalities)
        object.__setattr__(self, "cardinalities", cards)
        if len(cards) < 2:
            raise ValueError(f"need at least 2 sources, got {len(cards)}")
        if any(c < 2 for c in cards):
            raise ValueError(f"every source needs cardinality >= 2, got {list(cards)}")
        names = tuple(self.names) or tuple(
            ROLES[i] if i < len(ROLES) else f"source-{i}" for i in range(len(cards))
        )
        if len(names) != len(cards):
            raise ValueError("names and cardinalities differ in length")
        object.__setattr__(self, "names", names)

    @property
    def n_sources(self) -> int:
        return len(self.cardinalities)

    @property
    def size(self) -> int:
        return math.prod(self.cardinalities)

    def validate(self, s) -> np.ndarray:
        s = np.asarray(s)
        if s.shape[-1] != self.n_sources:
            raise ValueError(f"expected {self.n_sources} source values, got {s.shape[-1]}")
        if np.any(s < 0) or np.any(s >= np.array(self.cardinalities)):
            raise ValueError(f"source values {s.tolist()} out of range {list(self.cardinalities)}")
        return s

    def to_dict(self) -> dict:
        return {"cardinalities": list(self.cardinalities), "names": list(self.names)}


def default_space() -> SourceSpace:
    return SourceSpace(DEFAULT_CARDINALITIES, ROLES)


@dataclass
class Dataset:
    space: SourceSpace
    sources: np.ndarray  # (N, n_s) uint8
    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.sources)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def rows(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self.sources[idx], self.images[idx]

    def flat_images(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)


def square_side(image_size: int) -> int:
    return -(-image_size // 4)


def _offset(value: int, cardinality: int, free: int) -> int:
    # Spread `cardinality` positions over [0, free] with integer corners.
    return (value * free) // (cardinality - 1)


def render(s, space: SourceSpace | None = None, image_size: int = DEFAULT_IMAGE_SIZE) -> np.ndarray:
    """Render one source tuple to an ``(H, W, 3)`` float32 image."""
    space = space or default_space()
    s = space.validate(s)
    _check_renderable(space, image_size)
    vals = list(int(v) for v in s) + [0] * (len(ROLES) - space.n_sources)
    cards = list(space.cardinalities) + [1] * (len(ROLES) - space.n_sources)

    side = square_side(image_size)
    free = image_size - side
    col = _offset(vals[0], cards[0], free) if cards[0] > 1 else 0
    row = _offset(vals[1], cards[1], free) if cards[1] > 1 else 0

    img = np.empty((image_size, image_size, 3), dtype=np.float32)
    img[...] = BACKGROUND_PALETTE[vals[3]]
    img[row : row + side, col : col + side] = OBJECT_PALETTE[vals[2]]
    return img


def object_mask(s, space: SourceSpace | None = None, image_size: int = DEFAULT_IMAGE_SIZE) -> np.ndarray:
    """Boolean ``(H, W)`` mask of the pixels covered by the square."""
    space = space or default_space()
    s = space.validate(s)
    side = square_side(image_size)
    free = image_size - side
    col = _offset(int(s[0]), space.cardinalities[0], free)
    row = _offset(int(s[1]), space.cardinalities[1], free) if space.n_sources > 1 else 0
    mask = np.zeros((image_size, image_size), dtype=bool)
    mask[row : row + side, col : col + side] = True
    return mask


def _check_renderable(space: SourceSpace, image_size: int):
    if space.n_sources > len(ROLES):
        raise ValueError(f"renderer supports at most {len(ROLES)} sources, got {space.n_sources}")
    free = image_size - square_side(image_size)
    for i, c in enumerate(space.cardinalities[:2]):
        if c - 1 > free:
            raise ValueError(
                f"{space.names[i]} has {c} values but only {free + 1} distinct offsets fit"
            )
    for i, palette in ((2, OBJECT_PALETTE), (3, BACKGROUND_PALETTE)):
        if i < space.n_sources and space.cardinalities[i] > len(palette):
            raise ValueError(
                f"{space.names[i]} has {space.cardinalities[i]} values; palette holds {len(palette)}"
            )


def source_grid(cardinalities) -> np.ndarray:
    """Full Cartesian product in odometer order (last source fastest)."""
    cards = tuple(cardinalities)
    n = math.prod(cards)
    return np.stack(np.unravel_index(np.arange(n), cards), axis=1).astype(np.uint8)


def build_dataset(
    space: SourceSpace | None = None,
    image_size: int = DEFAULT_IMAGE_SIZE,
    cap: int = DEFAULT_CAP,
) -> Dataset:
    """Render every source combination of ``space``."""
    space = space or default_space()
    if space.size > cap:
        raise ValueError(
            f"exhaustive dataset would hold {space.size} rows "
            f"({' x '.join(map(str, space.cardinalities))}), above the cap of {cap}"
        )
    if max(space.cardinalities) > 255:
        raise ValueError("sources are stored as uint8; cardinalities must be <= 256")
    _check_renderable(space, image_size)
    sources = source_grid(space.cardinalities)
    images = np.stack([render(s, space, image_size) for s in sources])
    return Dataset(space, sources, images)


def sample_batch(d: Dataset, rng: RngStream, b: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``b`` rows uniformly with replacement."""
    if len(d) == 0:
        raise ValueError("cannot sample from an empty dataset")
    if b < 1:
        raise ValueError(f"batch size must be >= 1, got {b}")
    idx = rng.choice(len(d), b)
    return d.rows(idx)


# --- on-disk format ---------------------------------------------------------
#
# meta.json   {version, n_s, cardinalities, names, height, width, channels, count}
# sources.u8  count x n_s bytes, row-major
# images.u8   count x height x width x 3 bytes, row-major; value / 255 on load

def save_dataset(d: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    h, w, c = d.image_shape
    meta = {
        "version": FORMAT_VERSION,
        "n_s": d.space.n_sources,
        "cardinalities": list(d.space.cardinalities),
        "names": list(d.space.names),
        "height": h,
        "width": w,
        "channels": c,
        "count": len(d),
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    np.ascontiguousarray(d.sources, dtype=np.uint8).tofile(directory / "sources.u8")
    pixels = np.rint(d.images * 255).astype(np.uint8)
    np.ascontiguousarray(pixels).tofile(directory / "images.u8")
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"cannot read {directory / 'meta.json'}: {exc}") from exc

    required = ("version", "n_s", "cardinalities", "names", "height", "width", "channels", "count")
    missing = [k for k in required if k not in meta]
    if missing:
        raise DatasetFormatError(f"meta.json missing fields {missing}")
    if meta["version"] != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {meta['version']}")
    if meta["channels"] != 3:
        raise DatasetFormatError(f"expected 3 channels, got {meta['channels']}")
    if len(meta["cardinalities"]) != meta["n_s"] or len(meta["names"]) != meta["n_s"]:
        raise DatasetFormatError("n_s disagrees with cardinalities/names")
    try:
        space = SourceSpace(tuple(meta["cardinalities"]), tuple(meta["names"]))
    except ValueError as exc:
        raise DatasetFormatError(str(exc)) from exc

    n, h, w = int(meta["count"]), int(meta["height"]), int(meta["width"])
    sources = _read_payload(directory / "sources.u8", n * space.n_sources)
    pixels = _read_payload(directory / "images.u8", n * h * w * 3)
    sources = sources.reshape(n, space.n_sources)
    if np.any(sources >= np.array(space.cardinalities, dtype=np.int64)):
        raise DatasetFormatError("source values out of range of the declared cardinalities")
    images = pixels.reshape(n, h, w, 3).astype(np.float32) / np.float32(255)
    return Dataset(space, sources, images, meta)


def _read_payload(path: Path, expected: int) -> np.ndarray:
    if not path.exists():
        raise DatasetFormatError(f"missing payload {path.name}")
    data = np.fromfile(path, dtype=np.uint8)
    if data.size != expected:
        raise DatasetFormatError(
            f"{path.name} holds {data.size} bytes, meta.json implies {expected}"
        )
    return data
