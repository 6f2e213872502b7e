"""Answer point-prompt proposal requests exchanged through files.

The request is ``prompts.json`` in the bridge directory — a JSON array of
``{"image_id", "row", "col"}`` objects.  Every valid prompt is answered with
a binary mask at ``proposals/<image_id>_<row>_<col>.pgm`` under the same
directory.  Prompts that cannot be answered (unknown image, out-of-bounds
coordinates) are skipped and listed in ``errors.json``; they never abort the
batch.  An empty prompt list produces no files at all.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .formats import DataError, atomic_write_json, discover_images, load_image, save_mask


@dataclass(frozen=True)
class ProposalOutcome:
    written: int
    errors: list[dict]


def _load_prompts(bridge_dir: Path) -> list[dict]:
    path = bridge_dir / "prompts.json"
    if not path.is_file():
        raise DataError(f"{path}: no prompts file")
    try:
        prompts = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(prompts, list):
        raise DataError(f"{path}: expected a JSON array of prompts")
    for i, prompt in enumerate(prompts):
        if (not isinstance(prompt, dict)
                or not isinstance(prompt.get("image_id"), str)
                or not isinstance(prompt.get("row"), int)
                or not isinstance(prompt.get("col"), int)
                or isinstance(prompt.get("row"), bool)
                or isinstance(prompt.get("col"), bool)):
            raise DataError(f"{path}: prompt {i} must be "
                            f'{{"image_id": str, "row": int, "col": int}}')
    return prompts


def serve_proposals(images_dir: str | Path, bridge_dir: str | Path,
                    model) -> ProposalOutcome:
    """Answer every prompt in the bridge directory with the given model."""
    bridge_dir = Path(bridge_dir)
    prompts = _load_prompts(bridge_dir)
    if not prompts:
        return ProposalOutcome(0, [])
    images = discover_images(images_dir)
    model.load()
    cache: dict[str, np.ndarray] = {}
    proposals_dir = bridge_dir / "proposals"
    written = 0
    errors: list[dict] = []

    def fail(prompt: dict, reason: str) -> None:
        errors.append({"image_id": prompt["image_id"], "row": prompt["row"],
                       "col": prompt["col"], "reason": reason})

    for prompt in prompts:
        image_id, row, col = prompt["image_id"], prompt["row"], prompt["col"]
        if image_id not in images:
            fail(prompt, f"unknown image {image_id!r}")
            continue
        if image_id not in cache:
            cache[image_id] = load_image(images[image_id])
        rgb = cache[image_id]
        h, w = rgb.shape[:2]
        if not (0 <= row < h and 0 <= col < w):
            fail(prompt, f"prompt ({row}, {col}) outside {h}x{w} image")
            continue
        mask = model.propose(rgb, row, col)
        proposals_dir.mkdir(parents=True, exist_ok=True)
        save_mask(mask, proposals_dir / f"{image_id}_{row}_{col}.pgm")
        written += 1
    if errors:
        atomic_write_json(bridge_dir / "errors.json", errors)
    return ProposalOutcome(written, errors)
