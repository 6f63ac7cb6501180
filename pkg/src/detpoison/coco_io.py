"""COCO annotation / detection-results parsing and raster image I/O.

The annotation side produces an immutable :class:`DatasetIndex`; the image side
speaks binary PPM (P6, maxval 255) natively and defers any other format to
Pillow. Poisoning I/O must be lossless, so saving to lossy formats is refused.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptHeaderError,
    DanglingReferenceError,
    DuplicateIdError,
    InvalidBoxError,
    InvalidScoreError,
    MalformedJsonError,
    MissingKeyError,
    TruncatedPixelDataError,
    UnsupportedFormatError,
)
from .geometry import BBox

logger = logging.getLogger(__name__)

# Reference lossless format; everything else goes through Pillow.
PPM_EXTENSIONS = {".ppm"}
LOSSY_EXTENSIONS = {".jpg", ".jpeg"}


@dataclass(frozen=True)
class ImageInfo:
    id: int
    file_name: str
    width: int
    height: int


@dataclass(frozen=True)
class CategoryInfo:
    id: int
    name: str


@dataclass(frozen=True)
class GtAnnotation:
    id: int
    image_id: int
    bbox: BBox
    iscrowd: bool = False


@dataclass(frozen=True)
class Detection:
    """One predicted box in the standard COCO results-array shape."""

    image_id: int
    category_id: int
    bbox: BBox
    score: float


@dataclass
class DatasetIndex:
    """Fully linked view of a COCO instances file.

    ``gt`` has one entry per image (possibly empty), in file order, so
    iteration is deterministic.
    """

    images: list[ImageInfo]
    categories: list[CategoryInfo]
    gt: dict[int, list[GtAnnotation]]
    source_path: str | None = field(default=None, compare=False)

    def image_by_id(self, image_id: int) -> ImageInfo:
        try:
            return self._image_map[image_id]
        except KeyError:
            raise DanglingReferenceError(f"unknown image id {image_id}") from None

    def category_by_id(self, category_id: int) -> CategoryInfo:
        try:
            return self._category_map[category_id]
        except KeyError:
            raise DanglingReferenceError(f"unknown category id {category_id}") from None

    def resolve_category(self, name_or_id: str | int) -> int:
        """Accept a category id or (exact) name and return the id."""
        if isinstance(name_or_id, int):
            return self.category_by_id(name_or_id).id
        try:
            return self.category_by_id(int(name_or_id)).id
        except (ValueError, DanglingReferenceError):
            pass
        for c in self.categories:
            if c.name == name_or_id:
                return c.id
        raise DanglingReferenceError(f"unknown category {name_or_id!r}")

    def gt_boxes(self, image_id: int) -> list[BBox]:
        return [a.bbox for a in self.gt[image_id]]

    @property
    def _image_map(self) -> dict[int, ImageInfo]:
        return {im.id: im for im in self.images}

    @property
    def _category_map(self) -> dict[int, CategoryInfo]:
        return {c.id: c for c in self.categories}


def _require(entry: dict, key: str, entity: str):
    if key not in entry:
        raise MissingKeyError(f"{entity} is missing key {key!r}")
    return entry[key]


def load_annotations(path: str | Path) -> DatasetIndex:
    """Parse a COCO instances file into a linked DatasetIndex.

    GT boxes are clamped to image bounds; boxes degenerate after clamping are
    rejected from the index with a logged warning naming the annotation.
    """
    path = Path(path)
    try:
        with open(path, "rb") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise MalformedJsonError(f"{path}: {e}") from e
    if not isinstance(raw, dict):
        raise MalformedJsonError(f"{path}: top level must be a JSON object")
    for key in ("images", "annotations", "categories"):
        if key not in raw:
            raise MissingKeyError(f"{path} is missing top-level key {key!r}")

    images: list[ImageInfo] = []
    seen_images: set[int] = set()
    for i, entry in enumerate(raw["images"]):
        entity = f"image entry #{i}"
        img = ImageInfo(
            id=int(_require(entry, "id", entity)),
            file_name=str(_require(entry, "file_name", entity)),
            width=int(_require(entry, "width", entity)),
            height=int(_require(entry, "height", entity)),
        )
        if img.id in seen_images:
            raise DuplicateIdError(f"duplicate image id {img.id}")
        seen_images.add(img.id)
        images.append(img)

    categories: list[CategoryInfo] = []
    seen_cats: set[int] = set()
    for i, entry in enumerate(raw["categories"]):
        entity = f"category entry #{i}"
        cat = CategoryInfo(
            id=int(_require(entry, "id", entity)),
            name=str(_require(entry, "name", entity)),
        )
        if cat.id in seen_cats:
            raise DuplicateIdError(f"duplicate category id {cat.id}")
        seen_cats.add(cat.id)
        categories.append(cat)

    image_map = {im.id: im for im in images}
    gt: dict[int, list[GtAnnotation]] = {im.id: [] for im in images}
    seen_anns: set[int] = set()
    for i, entry in enumerate(raw["annotations"]):
        entity = f"annotation entry #{i}"
        ann_id = int(_require(entry, "id", entity))
        if ann_id in seen_anns:
            raise DuplicateIdError(f"duplicate annotation id {ann_id}")
        seen_anns.add(ann_id)
        image_id = int(_require(entry, "image_id", entity))
        category_id = int(_require(entry, "category_id", entity))
        if image_id not in image_map:
            raise DanglingReferenceError(
                f"annotation {ann_id} references unknown image id {image_id}"
            )
        if category_id not in seen_cats:
            raise DanglingReferenceError(
                f"annotation {ann_id} references unknown category id {category_id}"
            )
        bbox = _require(entry, "bbox", entity)
        if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
            raise InvalidBoxError(f"annotation {ann_id}: bbox must be [x, y, w, h]")
        img = image_map[image_id]
        clamped = _clamp_box(bbox, img.width, img.height, category_id)
        if clamped is None:
            logger.warning(
                "annotation %d on image %d rejected: degenerate box %s after clamping",
                ann_id, image_id, bbox,
            )
            continue
        gt[image_id].append(
            GtAnnotation(
                id=ann_id,
                image_id=image_id,
                bbox=clamped,
                iscrowd=bool(entry.get("iscrowd", 0)),
            )
        )

    return DatasetIndex(images=images, categories=categories, gt=gt,
                        source_path=str(path))


def _clamp_box(bbox, img_w: int, img_h: int, category_id: int) -> BBox | None:
    x, y, w, h = (float(v) for v in bbox)
    if not all(math.isfinite(v) for v in (x, y, w, h)):
        return None
    x0, y0 = max(x, 0.0), max(y, 0.0)
    x1, y1 = min(x + w, float(img_w)), min(y + h, float(img_h))
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return None
    return BBox(x0, y0, x1 - x0, y1 - y0, category_id)


def save_annotations(index: DatasetIndex, path: str | Path) -> None:
    """Serialize an index back to COCO instances JSON (deterministic order)."""
    doc = {
        "images": [
            {"id": im.id, "file_name": im.file_name,
             "width": im.width, "height": im.height}
            for im in index.images
        ],
        "annotations": [
            {"id": a.id, "image_id": a.image_id,
             "category_id": a.bbox.category_id,
             "bbox": [a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h],
             "area": a.bbox.area, "iscrowd": int(a.iscrowd)}
            for im in index.images
            for a in index.gt[im.id]
        ],
        "categories": [{"id": c.id, "name": c.name} for c in index.categories],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_detections(path: str | Path) -> list[Detection]:
    """Parse a COCO detection-results array, preserving file order."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise MalformedJsonError(f"{path}: {e}") from e
    if not isinstance(raw, list):
        raise MalformedJsonError(f"{path}: detection results must be a JSON array")
    out: list[Detection] = []
    for i, entry in enumerate(raw):
        entity = f"detection entry #{i}"
        score = float(_require(entry, "score", entity))
        if not math.isfinite(score) or not (0.0 <= score <= 1.0):
            raise InvalidScoreError(f"{entity}: score {score} outside [0, 1]")
        bbox = _require(entry, "bbox", entity)
        if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
            raise InvalidBoxError(f"{entity}: bbox must be [x, y, w, h]")
        x, y, w, h = (float(v) for v in bbox)
        try:
            box = BBox(x, y, w, h, int(_require(entry, "category_id", entity)))
        except ValueError as e:
            raise InvalidBoxError(f"{entity}: {e}") from e
        out.append(
            Detection(
                image_id=int(_require(entry, "image_id", entity)),
                category_id=box.category_id,
                bbox=box,
                score=score,
            )
        )
    return out


def save_detections(dets: list[Detection], path: str | Path) -> None:
    doc = [
        {"image_id": d.image_id, "category_id": d.category_id,
         "bbox": [d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h], "score": d.score}
        for d in dets
    ]
    with open(path, "w") as f:
        json.dump(doc, f)


def annotations_digest(path: str | Path) -> str:
    """SHA-256 of the raw file bytes; the clean-label byte-identity witness."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --- raster images ---------------------------------------------------------
#
# A RasterImage is a numpy array of shape (height, width, 3), dtype uint8.


def new_image(width: int, height: int, fill: int = 0) -> np.ndarray:
    return np.full((height, width, 3), fill, dtype=np.uint8)


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in PPM_EXTENSIONS:
        return _load_ppm(path)
    return _load_via_pillow(path)


def save_image(img: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    _check_raster(img)
    suffix = path.suffix.lower()
    if suffix in PPM_EXTENSIONS:
        _save_ppm(img, path)
        return
    if suffix in LOSSY_EXTENSIONS:
        raise UnsupportedFormatError(
            f"refusing lossy output format {suffix!r}; poisoning I/O must be lossless"
        )
    _save_via_pillow(img, path)


def is_lossless(path: str | Path) -> bool:
    return Path(path).suffix.lower() not in LOSSY_EXTENSIONS


def _check_raster(img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(
            f"raster image must be (h, w, 3) uint8, got shape {img.shape} dtype {img.dtype}"
        )


def _load_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if not data.startswith(b"P6"):
        raise UnsupportedFormatError(f"{path}: not a binary PPM (P6) file")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        # skip whitespace and '#' comments between header tokens
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise CorruptHeaderError(f"{path}: unterminated header comment")
            pos = nl + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise CorruptHeaderError(f"{path}: bad header token {token!r}")
        fields.append(int(token))
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise CorruptHeaderError(f"{path}: non-positive dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    pos += 1  # exactly one whitespace byte separates header from pixels
    n = width * height * 3
    pixels = data[pos : pos + n]
    if len(pixels) < n:
        raise TruncatedPixelDataError(
            f"{path}: header promises {n} pixel bytes, found {len(pixels)}"
        )
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3).copy()


def _save_ppm(img: np.ndarray, path: Path) -> None:
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(img).tobytes())


def _load_via_pillow(path: Path) -> np.ndarray:
    try:
        from PIL import Image, UnidentifiedImageError
    except ImportError as e:  # pragma: no cover - Pillow is a declared dep
        raise UnsupportedFormatError(
            f"{path}: Pillow not available for non-PPM formats"
        ) from e
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except UnidentifiedImageError as e:
        raise UnsupportedFormatError(f"{path}: {e}") from e
    except (OSError, SyntaxError) as e:
        raise CorruptHeaderError(f"{path}: {e}") from e
    return arr.copy()


def _save_via_pillow(img: np.ndarray, path: Path) -> None:
    try:
        from PIL import Image
    except ImportError as e:  # pragma: no cover
        raise UnsupportedFormatError(
            f"{path}: Pillow not available for non-PPM formats"
        ) from e
    try:
        Image.fromarray(img, mode="RGB").save(path)
    except (ValueError, KeyError) as e:
        raise UnsupportedFormatError(f"{path}: {e}") from e
