"""Image-folder to GEALFD01 dump pipeline."""

from __future__ import annotations

import csv
import logging
import os
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from geal.feature_store import ImageRecord, write_dump

from .model import ExtractorConfig, forward_features, load_model

log = logging.getLogger("geal_extractor")

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".gif", ".tif", ".tiff", ".webp"}

# ImageNet statistics, matching the backbone's pretraining
_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


def list_images(image_dir) -> list[Path]:
    """All decodable-looking files under image_dir, sorted by relative path."""
    root = Path(image_dir)
    files = [
        p for p in root.rglob("*")
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    ]
    return sorted(files, key=lambda p: p.relative_to(root).as_posix())


def preprocess(path, target_size) -> np.ndarray:
    """Decode, aspect-preserving resize, center crop, normalize. CHW float32."""
    tw, th = target_size
    with Image.open(path) as img:
        img = img.convert("RGB")
        w, h = img.size
        scale = max(tw / w, th / h)
        rw, rh = max(tw, round(w * scale)), max(th, round(h * scale))
        img = img.resize((rw, rh), Image.BICUBIC)
        left, top = (rw - tw) // 2, (rh - th) // 2
        img = img.crop((left, top, left + tw, top + th))
        arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = (arr - _MEAN) / _STD
    return arr.transpose(2, 0, 1)


def extract(image_dir, config: ExtractorConfig, out_path, manifest_path=None) -> dict:
    """Run the backbone over every image under image_dir; write a GEALFD01 dump.

    Undecodable files are skipped with a logged warning and listed in the
    returned summary. Records are written in sorted-filename order regardless
    of batching, so repeated runs produce byte-identical dumps. A CSV manifest
    (file name -> image_id) is written for traceability.
    """
    t0 = time.perf_counter()
    root = Path(image_dir)
    files = list_images(root)
    model = load_model(config)
    t_model = time.perf_counter() - t0

    skipped: list[str] = []
    manifest_rows: list[tuple[str, str]] = []

    def records():
        batch_paths: list[tuple[str, np.ndarray]] = []

        def flush():
            if not batch_paths:
                return
            pixels = torch.from_numpy(np.stack([a for _, a in batch_paths]))
            pixels = pixels.to(config.device)
            att, patches, glob = forward_features(model, pixels)
            for i, (image_id, _) in enumerate(batch_paths):
                yield ImageRecord(image_id, att[i], patches[i], glob[i])
            batch_paths.clear()

        for path in files:
            image_id = path.relative_to(root).as_posix()
            try:
                arr = preprocess(path, config.target_size)
            except Exception as e:  # undecodable image: skip, do not abort
                log.warning("skipping %s: %s", image_id, e)
                skipped.append(image_id)
                continue
            manifest_rows.append((str(path), image_id))
            batch_paths.append((image_id, arr))
            if len(batch_paths) >= config.batch_size:
                yield from flush()
        yield from flush()

    count = write_dump(records(), out_path)

    if manifest_path is None:
        manifest_path = os.fspath(out_path) + ".manifest.csv"
    with open(manifest_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["file_name", "image_id"])
        writer.writerows(manifest_rows)

    total = time.perf_counter() - t0
    return {
        "images": count,
        "skipped": skipped,
        "feature_dim": config.feature_dim,
        "region_count": config.region_count,
        "variant": config.variant,
        "resize": config.resize,
        "manifest": os.fspath(manifest_path),
        "timings_ms": {
            "model_load": t_model * 1e3,
            "extract": (total - t_model) * 1e3,
            "total": total * 1e3,
        },
    }
