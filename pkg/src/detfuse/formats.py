"""Readers and writers for COCO-style JSON and VisDrone-style text files.

Every parser either returns a value or raises a :class:`FormatError`
subclass; arbitrary input bytes never surface as a bare ``KeyError`` or
``TypeError``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Literal

from .core import (
    VISDRONE_CATEGORIES,
    BBox,
    CategoryTable,
    GroundTruthBox,
    ScoredDetection,
    from_xywh,
)

log = logging.getLogger(__name__)

__all__ = [
    "FormatError",
    "ParseError",
    "ValidationError",
    "UnknownReferenceError",
    "ImageInfo",
    "Dataset",
    "DetectionFile",
    "parse_coco_annotations",
    "parse_coco_detections",
    "parse_visdrone",
    "write_coco_detections",
    "write_coco_annotations",
    "write_visdrone_detections",
    "write_visdrone_ground_truth",
    "load_visdrone_dataset",
    "load_visdrone_detections",
]

# VisDrone class 0 marks ignored regions, 11 is "others"; neither is scored.
_VISDRONE_SKIPPED = (0, 11)


class FormatError(ValueError):
    """Base class for structured parse/validation failures."""


class ParseError(FormatError):
    def __init__(self, message: str, *, offset: int | None = None, line: int | None = None):
        where = []
        if offset is not None:
            where.append(f"byte {offset}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.line = line


class ValidationError(FormatError):
    pass


class UnknownReferenceError(FormatError):
    def __init__(self, kind: str, ref: Any):
        super().__init__(f"unknown {kind} id {ref!r}")
        self.kind = kind
        self.ref = ref


@dataclass(frozen=True)
class ImageInfo:
    id: int
    width: float
    height: float
    file_name: str = ""


@dataclass
class Dataset:
    images: list[ImageInfo]
    categories: CategoryTable
    ground_truth: list[GroundTruthBox] = field(default_factory=list)

    def image(self, image_id: int) -> ImageInfo:
        for im in self.images:
            if im.id == image_id:
                return im
        raise UnknownReferenceError("image", image_id)

    @property
    def image_ids(self) -> list[int]:
        return [im.id for im in self.images]

    def gts_for(self, image_id: int) -> list[GroundTruthBox]:
        return [g for g in self.ground_truth if g.image == image_id]


@dataclass
class DetectionFile:
    detections: list[ScoredDetection]
    model: int = 0

    def __len__(self) -> int:
        return len(self.detections)

    def by_image(self) -> dict[int, list[ScoredDetection]]:
        out: dict[int, list[ScoredDetection]] = {}
        for d in self.detections:
            out.setdefault(d.image, []).append(d)
        return out


def _decode(text: str | bytes) -> str:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError(f"invalid UTF-8: {e.reason}", offset=e.start) from None
    return text.lstrip("\ufeff")


def _load_json(text: str | bytes) -> Any:
    s = _decode(text)
    try:
        return json.loads(s)
    except json.JSONDecodeError as e:
        offset = len(s[: e.pos].encode("utf-8"))
        raise ParseError(e.msg, offset=offset) from None
    except RecursionError:
        raise ParseError("nesting too deep") from None


def _int(v: Any, what: str) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValidationError(f"{what} must be a number, got {v!r}")
    if isinstance(v, float):
        if not v.is_integer():
            raise ValidationError(f"{what} must be integral, got {v!r}")
        v = int(v)
    return v


def _real(v: Any, what: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValidationError(f"{what} must be a number, got {v!r}")
    try:
        f = float(v)
    except OverflowError:
        raise ValidationError(f"{what} out of range: {v!r}") from None
    if not math.isfinite(f):
        raise ValidationError(f"{what} must be finite, got {v!r}")
    return f


def _xywh(v: Any, what: str) -> BBox:
    if not isinstance(v, list) or len(v) != 4:
        raise ValidationError(f"{what} must be a 4-element [x, y, w, h] list, got {v!r}")
    x, y, w, h = (_real(c, what) for c in v)
    try:
        return from_xywh(x, y, w, h)
    except ValueError as e:
        raise ValidationError(f"{what}: {e}") from None


def _record(obj: Any, where: str) -> dict:
    if not isinstance(obj, dict):
        raise ValidationError(f"{where} must be an object, got {type(obj).__name__}")
    return obj


def _field(obj: dict, key: str, where: str) -> Any:
    try:
        return obj[key]
    except KeyError:
        raise ValidationError(f"{where} is missing {key!r}") from None


def _segmentation(v: Any) -> tuple[tuple[float, ...], ...] | None:
    # Only polygon lists are kept; RLE dicts are not decoded.
    if not isinstance(v, list) or not v:
        return None
    parts = []
    for poly in v:
        if not isinstance(poly, list) or len(poly) < 6 or len(poly) % 2:
            return None
        try:
            parts.append(tuple(_real(c, "segmentation") for c in poly))
        except ValidationError:
            return None
    return tuple(parts)


def parse_coco_annotations(text: str | bytes) -> Dataset:
    """Parse a COCO annotation file into a :class:`Dataset`.

    Boxes overhanging the image frame are clipped to it.
    """
    doc = _record(_load_json(text), "annotation file")
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise ValidationError(f"top-level {key!r} must be a list")

    cats = []
    for k, c in enumerate(doc["categories"]):
        c = _record(c, f"categories[{k}]")
        cid = _int(_field(c, "id", f"categories[{k}]"), f"categories[{k}].id")
        name = c.get("name", str(cid))
        cats.append((cid, str(name)))
    try:
        table = CategoryTable(tuple(cats))
    except ValueError as e:
        raise ValidationError(str(e)) from None

    images: dict[int, ImageInfo] = {}
    for k, im in enumerate(doc["images"]):
        where = f"images[{k}]"
        im = _record(im, where)
        iid = _int(_field(im, "id", where), f"{where}.id")
        if iid in images:
            raise ValidationError(f"duplicate image id {iid}")
        w = _real(_field(im, "width", where), f"{where}.width")
        h = _real(_field(im, "height", where), f"{where}.height")
        if w < 0 or h < 0:
            raise ValidationError(f"{where} has negative size")
        images[iid] = ImageInfo(iid, w, h, str(im.get("file_name", "")))

    gts = []
    for k, ann in enumerate(doc["annotations"]):
        where = f"annotations[{k}]"
        ann = _record(ann, where)
        iid = _int(_field(ann, "image_id", where), f"{where}.image_id")
        cid = _int(_field(ann, "category_id", where), f"{where}.category_id")
        if iid not in images:
            raise UnknownReferenceError("image", iid)
        if cid not in table:
            raise UnknownReferenceError("category", cid)
        if cid < 0:
            raise ValidationError(f"{where}: negative category id")
        box = _xywh(_field(ann, "bbox", where), f"{where}.bbox")
        im = images[iid]
        crowd = ann.get("iscrowd", 0)
        gts.append(
            GroundTruthBox(
                box.clip(im.width, im.height),
                cid,
                iid,
                crowd=bool(crowd) if isinstance(crowd, (int, float, bool)) else False,
                segmentation=_segmentation(ann.get("segmentation")),
            )
        )
    return Dataset(list(images.values()), table, gts)


def parse_coco_detections(text: str | bytes, model: int = 0) -> DetectionFile:
    doc = _load_json(text)
    if not isinstance(doc, list):
        raise ValidationError("detection file must be a JSON list")
    dets = []
    for k, entry in enumerate(doc):
        where = f"detections[{k}]"
        entry = _record(entry, where)
        iid = _int(_field(entry, "image_id", where), f"{where}.image_id")
        cid = _int(_field(entry, "category_id", where), f"{where}.category_id")
        box = _xywh(_field(entry, "bbox", where), f"{where}.bbox")
        score = _real(_field(entry, "score", where), f"{where}.score")
        if not 0.0 <= score <= 1.0:
            raise ValidationError(f"{where}.score {score} outside [0, 1]")
        if cid < 0:
            raise ValidationError(f"{where}: negative category id")
        dets.append(ScoredDetection(box, score, cid, model, iid))
    return DetectionFile(dets, model)


def parse_visdrone(
    text: str | bytes,
    image: int,
    mode: Literal["gt", "det"] = "gt",
    model: int = 0,
    categories: CategoryTable = VISDRONE_CATEGORIES,
) -> list[GroundTruthBox] | list[ScoredDetection]:
    """Parse one VisDrone per-image text file.

    Lines read ``x,y,w,h,score_or_flag,category,truncation,occlusion``. In
    ``gt`` mode the fifth field is a validity flag and zero entries are
    skipped; in ``det`` mode it is the confidence. Truncation and occlusion
    are parsed and dropped.
    """
    if mode not in ("gt", "det"):
        raise ValueError(f"mode must be 'gt' or 'det', got {mode!r}")
    s = _decode(text)
    out: list = []
    for lineno, raw in enumerate(s.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) == 9 and fields[-1] == "":
            fields.pop()
        if len(fields) != 8:
            raise ParseError(f"expected 8 comma-separated fields, got {len(fields)}", line=lineno)
        try:
            vals = [float(f) for f in fields]
        except ValueError:
            raise ParseError(f"non-numeric field in {line!r}", line=lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError("non-finite field", line=lineno)
        x, y, w, h, flag, cat, _trunc, _occl = vals
        if not cat.is_integer():
            raise ParseError(f"category must be integral, got {fields[5]!r}", line=lineno)
        cat_id = int(cat)
        if cat_id in _VISDRONE_SKIPPED:
            continue
        if cat_id not in categories:
            raise ValidationError(f"line {lineno}: category {cat_id} not in table")
        try:
            box = from_xywh(x, y, w, h)
        except ValueError as e:
            raise ParseError(str(e), line=lineno) from None
        if mode == "gt":
            if flag == 0:
                continue
            out.append(GroundTruthBox(box, cat_id, image))
        else:
            if not 0.0 <= flag <= 1.0:
                raise ValidationError(f"line {lineno}: score {flag} outside [0, 1]")
            out.append(ScoredDetection(box, flag, cat_id, model, image))
    return out


def _r6(v: float) -> float:
    r = round(float(v), 6)
    return 0.0 if r == 0 else r


def _coco_xywh(b: BBox) -> list[float]:
    # width from rounded corners keeps x + w within 1e-6 of x_br after parsing
    x0, y0, x1, y1 = (_r6(c) for c in b)
    return [x0, y0, _r6(x1 - x0), _r6(y1 - y0)]


def write_coco_detections(dets: DetectionFile | Iterable[ScoredDetection]) -> str:
    items = dets.detections if isinstance(dets, DetectionFile) else list(dets)
    if not items:
        return "[]"
    rows = [
        json.dumps(
            {
                "image_id": d.image,
                "category_id": d.category,
                "bbox": _coco_xywh(d.box),
                "score": _r6(d.score),
            }
        )
        for d in items
    ]
    return "[\n" + ",\n".join(rows) + "\n]\n"


def write_coco_annotations(ds: Dataset) -> str:
    anns = []
    for k, g in enumerate(ds.ground_truth, start=1):
        x, y, w, h = _coco_xywh(g.box)
        ann = {
            "id": k,
            "image_id": g.image,
            "category_id": g.category,
            "bbox": [x, y, w, h],
            "area": _r6(w * h),
            "iscrowd": int(g.crowd),
        }
        if g.segmentation:
            ann["segmentation"] = [list(p) for p in g.segmentation]
        anns.append(ann)
    doc = {
        "images": [
            {"id": im.id, "width": im.width, "height": im.height, "file_name": im.file_name}
            for im in ds.images
        ],
        "annotations": anns,
        "categories": [{"id": i, "name": n} for i, n in ds.categories.entries],
    }
    return json.dumps(doc, indent=1) + "\n"


def _num_txt(v: float) -> str:
    r = _r6(v)
    return str(int(r)) if float(r).is_integer() else repr(r)


def write_visdrone_detections(dets: Iterable[ScoredDetection]) -> str:
    lines = []
    for d in dets:
        x, y, w, h = _coco_xywh(d.box)
        lines.append(",".join([_num_txt(x), _num_txt(y), _num_txt(w), _num_txt(h),
                               _num_txt(d.score), str(d.category), "-1", "-1"]))
    return "".join(line + "\n" for line in lines)


def write_visdrone_ground_truth(gts: Iterable[GroundTruthBox]) -> str:
    lines = []
    for g in gts:
        x, y, w, h = _coco_xywh(g.box)
        lines.append(",".join([_num_txt(x), _num_txt(y), _num_txt(w), _num_txt(h),
                               "1", str(g.category), "0", "0"]))
    return "".join(line + "\n" for line in lines)


_RASTER_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff")


def _find_raster(images_dir: Path, stem: str) -> Path | None:
    for suf in _RASTER_SUFFIXES:
        p = images_dir / (stem + suf)
        if p.exists():
            return p
    return None


def load_visdrone_dataset(ann_dir: str | Path, images_dir: str | Path | None = None) -> Dataset:
    """Load a directory of per-image VisDrone annotation files.

    Image ids follow the sorted order of file stems, starting at 1. Sizes
    come from the matching raster when ``images_dir`` is given, otherwise
    from the annotation extents (no clipping possible then).
    """
    from PIL import Image

    ann_dir = Path(ann_dir)
    images, gts = [], []
    for iid, path in enumerate(sorted(ann_dir.glob("*.txt")), start=1):
        boxes = parse_visdrone(path.read_bytes(), iid, mode="gt")
        raster = _find_raster(Path(images_dir), path.stem) if images_dir else None
        if raster is not None:
            with Image.open(raster) as im:
                w, h = im.size
            name = raster.name
            boxes = [GroundTruthBox(g.box.clip(w, h), g.category, g.image) for g in boxes]
        else:
            if images_dir:
                log.warning("no raster found for %s", path.stem)
            w = max((g.box.x_br for g in boxes), default=0.0)
            h = max((g.box.y_br for g in boxes), default=0.0)
            name = path.stem
        images.append(ImageInfo(iid, float(w), float(h), name))
        gts.extend(boxes)
    return Dataset(images, VISDRONE_CATEGORIES, gts)


def load_visdrone_detections(
    det_dir: str | Path, stems_to_ids: dict[str, int], model: int = 0
) -> DetectionFile:
    dets: list[ScoredDetection] = []
    for path in sorted(Path(det_dir).glob("*.txt")):
        if path.stem not in stems_to_ids:
            raise UnknownReferenceError("image", path.stem)
        dets.extend(parse_visdrone(path.read_bytes(), stems_to_ids[path.stem], mode="det", model=model))
    return DetectionFile(dets, model)
