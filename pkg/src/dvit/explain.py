"""Attention explanation tooling: Grad-CAM heatmaps, overlay rendering,
and the rubric-based judging protocol (prompt construction, verdict
parsing, a deterministic offline mock judge, score aggregation).
"""

from __future__ import annotations

import io
import json
import re
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .data import resize_bilinear
from .tensor import Tensor

__all__ = [
    "ExplainError", "VerdictParseError",
    "Heatmap", "grad_cam", "render_overlay",
    "RUBRIC", "judge_prompt", "JudgeVerdict", "parse_verdict",
    "MockJudge", "aggregate_scores",
    "write_verdicts", "read_verdicts", "aggregate_table",
]


class ExplainError(ValueError):
    """Unknown layer, bad target class, or shape mismatch."""


class VerdictParseError(RuntimeError):
    """Judge response contains no standalone score in {0..3}."""

    def __init__(self, message: str, response: str):
        super().__init__(message)
        self.response = response


@dataclass
class Heatmap:
    values: np.ndarray           # H x W in [0, 1]
    layer: str
    target_class: int


def grad_cam(model, x: Tensor, target_class: int, layer: str = "stage4") -> Heatmap:
    """Class-activation heatmap from the gradients of one logit.

    Channel weights are the spatial means of d(logit)/d(activation); the
    weighted activation sum is rectified, bilinearly upsampled to the input
    resolution, then min-max normalized (an identically-zero map stays
    zero; a constant positive map becomes all ones).
    """
    if x.ndim != 4 or x.shape[0] != 1:
        raise ExplainError(f"grad_cam expects a single 1 x C x H x W input, got {x.shape}")
    logits = model(Tensor(x.data), training=False)
    if layer not in model.captured:
        raise ExplainError(f"unknown layer {layer!r}; available: "
                           f"{sorted(model.captured)}")
    if not 0 <= target_class < logits.shape[1]:
        raise ExplainError(f"target class {target_class} outside [0, {logits.shape[1]})")
    activation = model.captured[layer]
    if activation.ndim != 4:
        raise ExplainError(f"layer {layer!r} is not spatial: shape {activation.shape}")

    model.zero_grad()
    logits[0, target_class].backward()
    grad = activation.grad
    model.zero_grad()
    if grad is None:
        raise ExplainError(f"layer {layer!r} received no gradient from the target logit")

    alpha = grad[0].mean(axis=(1, 2))                        # per-channel weight
    raw = np.maximum((alpha[:, None, None] * activation.data[0]).sum(axis=0), 0.0)
    up = resize_bilinear(raw[None], x.shape[2])[0]
    lo, hi = up.min(), up.max()
    if hi == 0.0:
        values = np.zeros_like(up)
    elif hi == lo:
        values = np.ones_like(up)
    else:
        values = (up - lo) / (hi - lo)
    return Heatmap(values=values, layer=layer, target_class=int(target_class))


# overlay colormap: value 0 -> pure blue, value 1 -> pure red, linear in between
def _colormap(values: np.ndarray) -> np.ndarray:
    rgb = np.zeros(values.shape + (3,), dtype=np.float64)
    rgb[..., 0] = values
    rgb[..., 2] = 1.0 - values
    return rgb


def render_overlay(image, heatmap: Heatmap, path=None) -> bytes:
    """Blend the heatmap colormap over an RGB image at 0.5 alpha.

    ``image`` is 3 x H x W in [0, 1]; the heatmap must match H x W.
    Returns PNG bytes (and writes them to ``path`` when given).
    """
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ExplainError(f"image must be 3 x H x W, got {img.shape}")
    if heatmap.values.shape != img.shape[1:]:
        raise ExplainError(f"heatmap {heatmap.values.shape} does not match "
                           f"image {img.shape[1:]}")
    blend = 0.5 * img.transpose(1, 2, 0) + 0.5 * _colormap(heatmap.values)
    arr = np.clip(np.round(blend * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    png = buf.getvalue()
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(png)
    return png


RUBRIC = """Score the spatial alignment between the heatmap's high-activation
regions and the semantic regions of the ground-truth class. Ignore model
architecture, training details, and any numerical scores. Assign one integer:
0: attention almost entirely on irrelevant areas, with class-relevant regions largely ignored.
1: partial overlap with relevant regions, but a substantial portion of strong attention on irrelevant areas.
2: most strong attention on key class regions and structures, with limited spillover to background.
3: near-perfect alignment with class-discriminative regions and boundaries, with minimal unnecessary focus."""


def judge_prompt(class_name: str, image_ref: str, heatmap_ref: str) -> str:
    """Byte-stable judging prompt: rubric, ground-truth class, both images.

    Carries no model identity so the judgment cannot condition on it.
    """
    return (
        f"You are rating an attention heatmap for an aerial scene image.\n"
        f"Ground-truth class: {class_name}\n"
        f"Original image: {image_ref}\n"
        f"Attention heatmap (warmer = higher attention): {heatmap_ref}\n\n"
        f"{RUBRIC}\n\n"
        f"Reply with a single integer score in {{0,1,2,3}} followed by a "
        f"brief explanation."
    )


@dataclass
class JudgeVerdict:
    score: int
    explanation: str
    model_name: str = ""
    class_name: str = ""
    image_id: str = ""

    def __post_init__(self):
        if self.score not in (0, 1, 2, 3):
            raise ValueError(f"score must be in {{0,1,2,3}}, got {self.score}")


_SCORE_RE = re.compile(r"(?<!\d)[0-3](?!\d)")


def parse_verdict(response: str, model_name: str = "", class_name: str = "",
                  image_id: str = "") -> JudgeVerdict:
    """Extract the first standalone digit 0-3; the rest is the explanation."""
    match = _SCORE_RE.search(response)
    if match is None:
        raise VerdictParseError(f"no score in {{0..3}} found in judge response "
                                f"{response!r}", response)
    explanation = response[match.end():].lstrip(" .:,;\n\t")
    return JudgeVerdict(score=int(match.group()), explanation=explanation,
                        model_name=model_name, class_name=class_name,
                        image_id=image_id)


class MockJudge:
    """Deterministic offline judge scoring heatmap mass inside a mask.

    overlap = (heatmap * mask).sum() / heatmap.sum(); thresholds 0.25 /
    0.5 / 0.75 map overlap to scores 0..3.  A zero heatmap scores 0.
    """

    def score(self, heatmap_values: np.ndarray, mask: np.ndarray) -> int:
        hm = np.asarray(heatmap_values, dtype=np.float64)
        mk = np.asarray(mask, dtype=np.float64)
        if hm.shape != mk.shape:
            raise ExplainError(f"heatmap {hm.shape} does not match mask {mk.shape}")
        total = hm.sum()
        overlap = float((hm * mk).sum() / total) if total > 0 else 0.0
        if overlap < 0.25:
            return 0
        if overlap < 0.5:
            return 1
        if overlap < 0.75:
            return 2
        return 3

    def judge(self, heatmap_values: np.ndarray, mask: np.ndarray,
              model_name: str = "", class_name: str = "",
              image_id: str = "") -> JudgeVerdict:
        s = self.score(heatmap_values, mask)
        response = (f"Score: {s}. Heatmap mass overlap with the class region "
                    f"determined this rating.")
        return parse_verdict(response, model_name=model_name,
                             class_name=class_name, image_id=image_id)


def aggregate_scores(verdicts: Sequence[JudgeVerdict]) -> list[tuple[str, float]]:
    """Per-model mean score, sorted by mean descending then name."""
    if not verdicts:
        raise ValueError("no verdicts to aggregate")
    sums: dict[str, list] = {}
    for v in verdicts:
        entry = sums.setdefault(v.model_name, [0.0, 0])
        entry[0] += v.score
        entry[1] += 1
    table = [(name, s / n) for name, (s, n) in sums.items()]
    table.sort(key=lambda item: (-item[1], item[0]))
    return table


def write_verdicts(path, verdicts: Sequence[JudgeVerdict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in verdicts:
            fh.write(json.dumps(asdict(v), sort_keys=True) + "\n")


def read_verdicts(path) -> list[JudgeVerdict]:
    verdicts = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                verdicts.append(JudgeVerdict(**json.loads(line)))
    return verdicts


def aggregate_table(verdicts: Sequence[JudgeVerdict]) -> tuple[str, str]:
    """Render the aggregate as (text table, JSON document)."""
    table = aggregate_scores(verdicts)
    width = max(len(name) for name, _ in table)
    lines = [f"{'model':<{width}}  mean score"]
    lines += [f"{name:<{width}}  {mean:.4f}" for name, mean in table]
    as_json = json.dumps([{"model": name, "mean_score": mean} for name, mean in table],
                         indent=2)
    return "\n".join(lines) + "\n", as_json
