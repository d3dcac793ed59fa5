"""Dataset plumbing: manifests, the split/merge protocol, image decoding
and normalization, Canny edge maps, and the caption/generation/super-
resolution endpoint clients with deterministic offline mocks.

Manifest files are line-delimited TSV:

    path<TAB>class<TAB>split<TAB>provenance<TAB>source_id

``split`` is train/valid/test or "-" when unassigned; ``source_id`` is "-"
for original entries and names the source image path for generated ones.
"""

from __future__ import annotations

import base64
import io
import json
import os
import time
import urllib.error
import urllib.request
from collections import deque
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .tensor import Tensor, load_tensors

__all__ = [
    "ManifestEntry", "ManifestError", "SplitError", "ImageFormatError",
    "EndpointError", "EndpointParseError",
    "read_manifest", "write_manifest", "stratified_split", "merge_and_resplit",
    "NormalizationSpec", "decode_and_normalize", "decode_image",
    "EdgeMap", "canny_edges",
    "EndpointConfig", "HttpEndpoint",
    "MockCaptionClient", "MockGenerationClient", "MockSuperresClient",
    "request_caption", "request_generation", "request_superres",
    "augment_dataset", "ablation_manifests",
]

SPLITS = ("train", "valid", "test")
PROVENANCES = ("original", "superres", "diffusion")


class ManifestError(ValueError):
    """Malformed manifest file or entry."""


class SplitError(ValueError):
    """Split protocol violation (bad ratios, empty class, bad provenance)."""


class ImageFormatError(ValueError):
    """Unreadable or non-RGB image input."""


class EndpointError(RuntimeError):
    """Endpoint unreachable after retries."""


class EndpointParseError(RuntimeError):
    """Endpoint returned a malformed response body."""


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    split: str = "-"
    provenance: str = "original"
    source_id: str = "-"

    def __post_init__(self):
        for text, what in ((self.path, "path"), (self.label, "class")):
            if not text or "\t" in text or "\n" in text:
                raise ManifestError(f"bad {what} field: {text!r}")
        if self.split not in SPLITS + ("-",):
            raise ManifestError(f"bad split {self.split!r} for {self.path}")
        if self.provenance not in PROVENANCES:
            raise ManifestError(f"bad provenance {self.provenance!r} for {self.path}")
        if self.provenance != "original" and self.source_id == "-":
            raise ManifestError(f"generated entry {self.path} lacks a source_id")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ManifestError(f"{path}:{lineno}: expected 5 tab-separated fields, "
                                    f"got {len(parts)}")
            try:
                entries.append(ManifestEntry(*parts))
            except ManifestError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
    return entries


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(f"{e.path}\t{e.label}\t{e.split}\t{e.provenance}\t{e.source_id}\n")


def class_names(entries: Sequence[ManifestEntry]) -> list[str]:
    return sorted({e.label for e in entries})


def label_ids(entries: Sequence[ManifestEntry]) -> dict[str, int]:
    return {name: i for i, name in enumerate(class_names(entries))}


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def apportion(n: int, ratios: Sequence[float]) -> list[int]:
    """Deterministic apportionment of n items to the given ratios.

    Allocates sequentially: each bucket gets its share of the remaining
    items rounded half up, the last bucket takes the rest.  Exact when the
    shares are integral; e.g. 7 at (0.8, 0.1, 0.1) gives (6, 1, 0).
    """
    if any(r < 0 for r in ratios):
        raise SplitError(f"ratios must be non-negative, got {ratios}")
    total = float(sum(ratios))
    if abs(total - 1.0) > 1e-9:
        raise SplitError(f"ratios must sum to 1, got {ratios}")
    counts = []
    left = n
    rest = total
    for r in ratios[:-1]:
        take = min(left, _round_half_up(left * (r / rest))) if rest > 0 else 0
        counts.append(take)
        left -= take
        rest -= r
    counts.append(left)
    return counts


def _assign_splits(entries: Sequence[ManifestEntry], ratios: Sequence[float],
                   seed: int, split_names: Sequence[str]) -> list[ManifestEntry]:
    if not entries:
        raise SplitError("cannot split an empty manifest")
    by_class: dict[str, list[ManifestEntry]] = {}
    for e in entries:
        by_class.setdefault(e.label, []).append(e)
    out: list[ManifestEntry] = []
    for class_id, name in enumerate(class_names(entries)):
        group = sorted(by_class[name], key=lambda e: e.path)
        if not group:
            raise SplitError(f"class {name!r} has no entries")
        rng = np.random.default_rng(np.random.SeedSequence([seed, class_id]))
        order = rng.permutation(len(group))
        counts = apportion(len(group), ratios)
        cursor = 0
        for split, count in zip(split_names, counts):
            for i in order[cursor:cursor + count]:
                out.append(replace(group[i], split=split))
            cursor += count
    return out


def stratified_split(entries: Sequence[ManifestEntry],
                     ratios: Sequence[float] = (0.8, 0.1, 0.1),
                     seed: int = 0) -> list[ManifestEntry]:
    """Assign train/valid/test per class at the given ratios, deterministically."""
    if len(ratios) != 3:
        raise SplitError(f"expected 3 ratios, got {len(ratios)}")
    return _assign_splits(entries, ratios, seed, SPLITS)


def merge_and_resplit(original: Sequence[ManifestEntry],
                      generated: Sequence[ManifestEntry],
                      ratios: Sequence[float] = (0.8, 0.2),
                      seed: int = 0) -> list[ManifestEntry]:
    """Build the final manifest from a split original set plus generated entries.

    The final test set is the union of the original valid and test sets and
    never contains generated images.  Original train entries and generated
    entries are pooled and re-split into train/valid per class at ``ratios``.
    Generated entries must derive from original train images.
    """
    if len(ratios) != 2:
        raise SplitError(f"expected 2 ratios, got {len(ratios)}")
    train_paths = {e.path for e in original if e.split == "train"}
    for g in generated:
        if g.provenance == "original":
            raise SplitError(f"generated entry {g.path} has provenance 'original'")
        if g.source_id not in train_paths:
            raise SplitError(f"generated entry {g.path} derives from {g.source_id!r}, "
                             f"which is not an original train image")
    pool = [e for e in original if e.split == "train"] + list(generated)
    final = _assign_splits(pool, ratios, seed, ("train", "valid"))
    final.extend(replace(e, split="test") for e in original if e.split in ("valid", "test"))
    return final


# -- decoding and normalization ---------------------------------------------

@dataclass(frozen=True)
class NormalizationSpec:
    mean: tuple = (0.485, 0.456, 0.406)
    std: tuple = (0.229, 0.224, 0.225)
    size: int = 512

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("mean and std must have 3 components")
        if any(s <= 0 for s in self.std):
            raise ValueError(f"std components must be positive, got {self.std}")
        if self.size < 1:
            raise ValueError("size must be positive")


def decode_image(path) -> np.ndarray:
    """Read an RGB image to a 3 x H x W float64 array in [0, 1].

    PNG (and other PIL rasters) must already be RGB.  Files ending in
    ``.tensors`` are raw sidecars holding one tensor named "image".
    """
    if str(path).endswith(".tensors"):
        tensors, _ = load_tensors(path)
        if "image" not in tensors:
            raise ImageFormatError(f"{path}: sidecar lacks an 'image' tensor")
        img = np.asarray(tensors["image"], dtype=np.float64)
        if img.ndim != 3 or img.shape[0] != 3:
            raise ImageFormatError(f"{path}: sidecar image must be 3 x H x W, got {img.shape}")
        return img
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise ImageFormatError(f"{path}: expected RGB image, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: unreadable image: {exc}") from exc
    return arr.transpose(2, 0, 1)


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a C x H x W array with half-pixel centers.

    Sampling coordinates are clamped at the borders.  Identity (the same
    array) when the input is already size x size.
    """
    C, H, W = img.shape
    if (H, W) == (size, size):
        return img

    def axis_weights(n_in, n_out):
        centers = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
        lo = np.floor(centers).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = centers - lo
        return lo, hi, frac

    y0, y1, fy = axis_weights(H, size)
    x0, x1, fx = axis_weights(W, size)
    rows = img[:, y0, :] * (1 - fy)[None, :, None] + img[:, y1, :] * fy[None, :, None]
    out = rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx
    return out


def decode_and_normalize(path, spec: NormalizationSpec = NormalizationSpec()) -> Tensor:
    """Decode, resize to spec.size, and standardize to the per-channel spec."""
    img = resize_bilinear(decode_image(path), spec.size)
    mean = np.asarray(spec.mean, dtype=np.float64).reshape(3, 1, 1)
    std = np.asarray(spec.std, dtype=np.float64).reshape(3, 1, 1)
    return Tensor((img - mean) / std)


# -- edge maps ---------------------------------------------------------------

@dataclass
class EdgeMap:
    mask: np.ndarray                     # H x W uint8 in {0, 1}
    low: float
    high: float

    def to_png_bytes(self) -> bytes:
        im = Image.fromarray((self.mask * 255).astype(np.uint8), mode="L")
        buf = io.BytesIO()
        im.save(buf, format="PNG")
        return buf.getvalue()


def _gaussian_kernel5(sigma: float = 1.4) -> np.ndarray:
    ax = np.arange(5) - 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _convolve2d_reflect(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(img, ((ph, ph), (pw, pw)), mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw))
    return np.einsum("ijkl,kl->ij", windows, kernel)


def canny_edges(image, low: float = 100.0, high: float = 150.0) -> EdgeMap:
    """Canny detector on a grayscale image (8-bit value scale).

    Gaussian blur (sigma 1.4, 5x5), Sobel gradients, non-maximum
    suppression over the 4 quantized directions, then hysteresis linking
    from strong pixels through weak ones (8-connected).  On plateau ties
    the earlier pixel along the gradient direction is kept, so a symmetric
    step yields a single-pixel line.
    """
    if low >= high:
        raise ValueError(f"low threshold must be below high, got low={low} high={high}")
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a grayscale H x W image, got shape {img.shape}")
    H, W = img.shape

    blurred = _convolve2d_reflect(img, _gaussian_kernel5())
    sx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
    sy = np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], dtype=np.float64)
    gx = _convolve2d_reflect(blurred, sx)
    gy = _convolve2d_reflect(blurred, sy)
    mag = np.hypot(gx, gy)
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = (np.round(angle / 45.0).astype(np.int64)) % 4

    # unit steps along each quantized direction (dy, dx)
    steps = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    padded = np.pad(mag, 1, mode="constant")
    keep = np.zeros_like(mag, dtype=bool)
    for s, (dy, dx) in steps.items():
        fwd = padded[1 + dy:1 + dy + H, 1 + dx:1 + dx + W]
        bwd = padded[1 - dy:1 - dy + H, 1 - dx:1 - dx + W]
        keep |= (sector == s) & (mag >= fwd) & (mag > bwd)
    keep &= mag >= low

    strong = keep & (mag >= high)
    weak = keep & ~strong
    mask = np.zeros((H, W), dtype=np.uint8)
    queue = deque(zip(*np.nonzero(strong)))
    mask[strong] = 1
    while queue:
        y, x = queue.popleft()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = y + dy, x + dx
                if 0 <= ny < H and 0 <= nx < W and weak[ny, nx] and not mask[ny, nx]:
                    mask[ny, nx] = 1
                    queue.append((ny, nx))
    return EdgeMap(mask=mask, low=float(low), high=float(high))


# -- endpoint clients ---------------------------------------------------------

@dataclass
class EndpointConfig:
    url: Optional[str] = None
    token_env: str = "DVIT_API_TOKEN"
    retries: int = 3
    backoff: float = 0.5
    timeout: float = 30.0


class HttpEndpoint:
    """JSON-over-HTTP client with bearer auth and exponential backoff."""

    def __init__(self, cfg: EndpointConfig):
        if not cfg.url:
            raise ValueError("endpoint URL is not configured")
        self.cfg = cfg

    def post_json(self, payload: dict) -> dict:
        body = json.dumps(payload).encode()
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.cfg.token_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        last_error = None
        for attempt in range(self.cfg.retries):
            if attempt:
                time.sleep(self.cfg.backoff * (2 ** (attempt - 1)))
            req = urllib.request.Request(self.cfg.url, data=body, headers=headers)
            try:
                with urllib.request.urlopen(req, timeout=self.cfg.timeout) as resp:
                    raw = resp.read()
                break
            except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
                last_error = exc
        else:
            raise EndpointError(f"{self.cfg.url}: unreachable after "
                                f"{self.cfg.retries} attempts: {last_error}")
        try:
            parsed = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise EndpointParseError(f"{self.cfg.url}: malformed response body: {exc}") from exc
        if not isinstance(parsed, dict):
            raise EndpointParseError(f"{self.cfg.url}: expected a JSON object response")
        return parsed


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _b64decode_field(response: dict, key: str, origin: str) -> bytes:
    if key not in response or not isinstance(response[key], str):
        raise EndpointParseError(f"{origin}: response lacks string field {key!r}")
    try:
        return base64.b64decode(response[key], validate=True)
    except Exception as exc:
        raise EndpointParseError(f"{origin}: field {key!r} is not valid base64") from exc


def request_caption(image_png: bytes, client) -> str:
    """Ask the caption endpoint (or mock) for a generation prompt."""
    response = client.post_json({"image": _b64(image_png), "prompt": "", "edges": ""})
    if "prompt" not in response or not isinstance(response["prompt"], str):
        raise EndpointParseError("caption endpoint: response lacks string field 'prompt'")
    return response["prompt"]


def request_generation(prompt: str, edges: EdgeMap, image_png: bytes, client) -> bytes:
    """Edge-conditioned generation; returns PNG bytes of the generated image."""
    response = client.post_json({"image": _b64(image_png), "prompt": prompt,
                                 "edges": _b64(edges.to_png_bytes())})
    return _b64decode_field(response, "image", "generation endpoint")


def request_superres(image_png: bytes, client) -> bytes:
    """Super-resolution enhancement; returns PNG bytes of the enhanced image."""
    response = client.post_json({"image": _b64(image_png), "prompt": "", "edges": ""})
    return _b64decode_field(response, "image", "superres endpoint")


def _stable_seed(*parts: str) -> np.random.Generator:
    material = [len(parts)]
    for p in parts:
        material.extend(p.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(material))


def _png_from_array(arr: np.ndarray) -> bytes:
    im = Image.fromarray(arr.astype(np.uint8), mode="RGB")
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    return buf.getvalue()


class MockCaptionClient:
    """Deterministic offline caption client echoing a descriptive template."""

    def post_json(self, payload: dict) -> dict:
        digest = _stable_seed("caption", payload.get("image", "")).integers(0, 10 ** 6)
        return {"prompt": f"aerial photograph, highly detailed, reference {digest:06d}"}


class MockGenerationClient:
    """Deterministic offline generator: image statistics keyed by the prompt."""

    def __init__(self, size: int = 24):
        self.size = size

    def post_json(self, payload: dict) -> dict:
        rng = _stable_seed("generation", payload.get("prompt", ""), payload.get("edges", ""))
        img = rng.integers(0, 256, size=(self.size, self.size, 3))
        return {"image": _b64(_png_from_array(img))}


class MockSuperresClient:
    """Deterministic offline enhancer keyed by the input image bytes."""

    def __init__(self, size: int = 24):
        self.size = size

    def post_json(self, payload: dict) -> dict:
        rng = _stable_seed("superres", payload.get("image", ""))
        img = rng.integers(0, 256, size=(self.size, self.size, 3))
        return {"image": _b64(_png_from_array(img))}


@dataclass
class AugmentClients:
    caption: object
    generation: object
    superres: object

    @classmethod
    def mocks(cls) -> "AugmentClients":
        return cls(caption=MockCaptionClient(), generation=MockGenerationClient(),
                   superres=MockSuperresClient())


def augment_dataset(entries: Sequence[ManifestEntry], out_dir,
                    clients: Optional[AugmentClients] = None,
                    superres: bool = True, diffusion: bool = True,
                    diffusion_per_image: int = 2,
                    edge_low: float = 100.0, edge_high: float = 150.0,
                    ) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    """Produce generated entries for every original train image.

    For each train entry: one super-resolved image and ``diffusion_per_image``
    edge-conditioned generations (captioned first), subject to the toggles.
    Returns (generated_entries, quarantined_entries); endpoint failures
    quarantine the source entry instead of aborting.
    """
    clients = clients or AugmentClients.mocks()
    os.makedirs(out_dir, exist_ok=True)
    generated: list[ManifestEntry] = []
    quarantined: list[ManifestEntry] = []
    for e in entries:
        if e.split != "train" or e.provenance != "original":
            continue
        stem = os.path.splitext(os.path.basename(e.path))[0]
        try:
            img = decode_image(e.path)
            png = _png_from_array((img.transpose(1, 2, 0) * 255.0).round())
            made = []
            if superres:
                sr = request_superres(png, clients.superres)
                sr_path = os.path.join(out_dir, f"{stem}_sr.png")
                made.append((sr_path, sr, "superres"))
            if diffusion:
                gray = img.mean(axis=0) * 255.0
                edges = canny_edges(gray, edge_low, edge_high)
                prompt = request_caption(png, clients.caption)
                for k in range(diffusion_per_image):
                    gen = request_generation(f"{prompt} [variant {k}]", edges, png,
                                             clients.generation)
                    made.append((os.path.join(out_dir, f"{stem}_gen{k}.png"), gen, "diffusion"))
        except (EndpointError, EndpointParseError):
            quarantined.append(e)
            continue
        for gen_path, blob, provenance in made:
            with open(gen_path, "wb") as fh:
                fh.write(blob)
            generated.append(ManifestEntry(path=gen_path, label=e.label, split="-",
                                           provenance=provenance, source_id=e.path))
    return generated, quarantined


def ablation_manifests(original: Sequence[ManifestEntry],
                       generated: Sequence[ManifestEntry],
                       ratios: Sequence[float] = (0.8, 0.2),
                       seed: int = 0) -> dict[str, list[ManifestEntry]]:
    """The four pipeline configurations: every combination of the two toggles."""
    def pick(superres: bool, diffusion: bool):
        keep = [g for g in generated
                if (superres and g.provenance == "superres")
                or (diffusion and g.provenance == "diffusion")]
        return merge_and_resplit(original, keep, ratios, seed)

    return {
        "baseline": pick(False, False),
        "superres": pick(True, False),
        "diffusion": pick(False, True),
        "superres+diffusion": pick(True, True),
    }
