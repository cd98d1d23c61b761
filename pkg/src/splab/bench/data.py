"""Dataset containers, instance extraction and on-disk formats (PGM + COCO JSON)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import label

from ..detector.boxes import InstanceAnnotation

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)
MIN_EXTENT_FRACTION = 0.01


@dataclass
class Sample:
    image_id: int
    image: np.ndarray  # (H, W) floats in [0, 1]
    instances: list[InstanceAnnotation]
    file_name: str = ""
    specs: list = field(default_factory=list)

    @property
    def labels(self) -> set[int]:
        return {inst.class_id for inst in self.instances}


@dataclass
class Dataset:
    samples: list[Sample]
    class_names: list[str]
    image_size: int

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def by_id(self) -> dict[int, Sample]:
        return {s.image_id: s for s in self.samples}

    def images_with(self, class_id: int) -> list[int]:
        return [s.image_id for s in self.samples if class_id in s.labels]

    def single_label_with(self, class_id: int) -> list[int]:
        return [s.image_id for s in self.samples if s.labels == {class_id}]


def masks_to_instances(defect_map: np.ndarray, class_id: int, min_fraction: float = MIN_EXTENT_FRACTION) -> list[InstanceAnnotation]:
    """8-connected components of a binary map, minus those narrower or shorter than
    ``min_fraction`` of the image width or height."""
    defect_map = np.asarray(defect_map, dtype=bool)
    if defect_map.ndim != 2:
        raise ValueError(f"defect map must be 2-D, got shape {defect_map.shape}")
    h, w = defect_map.shape
    labels, n = label(defect_map, structure=EIGHT_CONNECTED)
    out = []
    for comp in range(1, n + 1):
        mask = labels == comp
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        if cols[-1] - cols[0] + 1 < min_fraction * w or rows[-1] - rows[0] + 1 < min_fraction * h:
            continue
        out.append(InstanceAnnotation.from_mask(mask, class_id))
    return out


# -- run-length masks ----------------------------------------------------------


def rle_encode(mask: np.ndarray) -> dict:
    """Uncompressed COCO RLE: column-major run lengths starting with zeros."""
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": [int(c) for c in counts]}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = np.asarray(rle["counts"], dtype=np.int64)
    if counts.sum() != h * w:
        raise ValueError("RLE counts do not cover the mask")
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape((h, w), order="F")


# -- images --------------------------------------------------------------------


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    img = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode("ascii"))
        pos = end
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != "P5" or maxval != 255:
        raise ValueError(f"{path}: only 8-bit binary PGM is supported")
    img = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return img.astype(np.float64) / 255.0


# -- dataset directories -------------------------------------------------------

ANNOTATION_FILE = "annotations.json"


def save_dataset(dataset: Dataset, root: str | Path) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    for s in dataset.samples:
        name = s.file_name or f"{s.image_id:06d}.pgm"
        write_pgm(root / "images" / name, s.image)
        h, w = s.image.shape
        images.append({"id": s.image_id, "file_name": f"images/{name}", "width": w, "height": h})
        for inst in s.instances:
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": s.image_id,
                    "category_id": inst.class_id,
                    "bbox": inst.bbox.to_pixels_xywh(w, h),
                    "area": int(inst.mask.sum()),
                    "segmentation": rle_encode(inst.mask),
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": i, "name": n} for i, n in enumerate(dataset.class_names)],
    }
    path = root / ANNOTATION_FILE
    path.write_text(json.dumps(doc))
    return path


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    path = root / ANNOTATION_FILE
    if not path.exists():
        raise FileNotFoundError(f"no {ANNOTATION_FILE} in {root}")
    doc = json.loads(path.read_text())
    cats = sorted(doc["categories"], key=lambda c: c["id"])
    if [c["id"] for c in cats] != list(range(len(cats))):
        raise ValueError("category ids must be 0..C-1")
    per_image: dict[int, list[InstanceAnnotation]] = {}
    for ann in sorted(doc["annotations"], key=lambda a: a["id"]):
        mask = rle_decode(ann["segmentation"])
        per_image.setdefault(ann["image_id"], []).append(InstanceAnnotation.from_mask(mask, ann["category_id"]))
    samples = []
    sizes = set()
    for img in sorted(doc["images"], key=lambda i: i["id"]):
        image = read_pgm(root / img["file_name"])
        sizes.add(image.shape[0])
        samples.append(Sample(img["id"], image, per_image.get(img["id"], []), Path(img["file_name"]).name))
    if len(sizes) > 1:
        raise ValueError("mixed image sizes are not supported")
    return Dataset(samples, [c["name"] for c in cats], sizes.pop() if sizes else 0)
