import http.server
import json
import threading

import numpy as np
import pytest
from PIL import Image

from dvit.data import (
    AugmentClients, EdgeMap, EndpointConfig, EndpointError, EndpointParseError,
    HttpEndpoint, ImageFormatError, ManifestEntry, ManifestError,
    MockCaptionClient, MockGenerationClient, MockSuperresClient,
    NormalizationSpec, SplitError, ablation_manifests,
    apportion, augment_dataset, canny_edges, class_names, decode_and_normalize,
    decode_image, merge_and_resplit, read_manifest, request_caption,
    request_generation, request_superres, resize_bilinear, stratified_split,
    write_manifest,
)


def entry(path, label, split="-", provenance="original", source="-"):
    return ManifestEntry(path=path, label=label, split=split,
                         provenance=provenance, source_id=source)


def flat_entries(per_class, classes=2):
    out = []
    for c in range(classes):
        for i in range(per_class):
            out.append(entry(f"img/c{c}_{i:04d}.png", f"class{c}"))
    return out


def save_png(path, arr):
    Image.fromarray(arr.astype(np.uint8)).save(path)


# -- manifest ----------------------------------------------------------------

def test_manifest_round_trip(tmp_path):
    path = tmp_path / "m.tsv"
    entries = [
        entry("a.png", "river", "train"),
        entry("b.png", "forest", "valid", "superres", "a.png"),
        entry("c.png", "field", "-", "diffusion", "a.png"),
    ]
    write_manifest(path, entries)
    assert read_manifest(path) == entries


def test_manifest_validates_fields():
    with pytest.raises(ManifestError):
        entry("a.png", "river", split="holdout")
    with pytest.raises(ManifestError):
        entry("a.png", "river", provenance="gan")
    with pytest.raises(ManifestError):
        entry("a.png", "riv\ter")
    with pytest.raises(ManifestError):
        entry("", "river")
    with pytest.raises(ManifestError):
        # generated rows must carry their source image
        entry("a.png", "river", provenance="diffusion")


def test_manifest_rejects_bad_rows(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("a.png\triver\n")  # too few columns
    with pytest.raises(ManifestError):
        read_manifest(path)


def test_class_names_sorted_unique():
    entries = [entry("a", "urban"), entry("b", "field"), entry("c", "urban")]
    assert class_names(entries) == ["field", "urban"]


# -- split protocol ----------------------------------------------------------

def test_apportion_fixtures():
    assert apportion(7, (0.8, 0.1, 0.1)) == [6, 1, 0]
    assert apportion(10, (0.8, 0.1, 0.1)) == [8, 1, 1]
    assert apportion(100, (0.8, 0.1, 0.1)) == [80, 10, 10]
    assert apportion(3200, (0.8, 0.2)) == [2560, 640]
    assert apportion(0, (0.8, 0.2)) == [0, 0]
    assert apportion(1, (0.8, 0.1, 0.1)) == [1, 0, 0]


def test_apportion_always_sums_to_n():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(0, 50))
        w = rng.uniform(0.05, 1.0, size=3)
        assert sum(apportion(n, w / w.sum())) == n


def test_stratified_split_counts_per_class():
    entries = flat_entries(10, classes=3)
    out = stratified_split(entries, (0.8, 0.1, 0.1), seed=0)
    assert len(out) == len(entries)
    for c in range(3):
        rows = [e for e in out if e.label == f"class{c}"]
        counts = {s: sum(e.split == s for e in rows)
                  for s in ("train", "valid", "test")}
        assert counts == {"train": 8, "valid": 1, "test": 1}


def test_stratified_split_deterministic_and_seed_sensitive():
    entries = flat_entries(20)
    a = stratified_split(entries, (0.8, 0.1, 0.1), seed=5)
    b = stratified_split(entries, (0.8, 0.1, 0.1), seed=5)
    c = stratified_split(entries, (0.8, 0.1, 0.1), seed=6)
    assert a == b
    assert a != c


def test_stratified_split_ignores_input_order():
    entries = flat_entries(12)
    shuffled = list(reversed(entries))
    a = sorted(stratified_split(entries, (0.8, 0.1, 0.1), seed=3),
               key=lambda e: e.path)
    b = sorted(stratified_split(shuffled, (0.8, 0.1, 0.1), seed=3),
               key=lambda e: e.path)
    assert a == b


def test_stratified_split_validates_ratios():
    entries = flat_entries(4)
    with pytest.raises(SplitError):
        stratified_split(entries, (0.5, 0.2), seed=0)  # needs three ratios
    with pytest.raises(SplitError):
        stratified_split(entries, (0.5, 0.4, 0.2), seed=0)  # sums past one


def test_merge_and_resplit_counts():
    original = stratified_split(flat_entries(100, classes=2), (0.8, 0.1, 0.1), seed=0)
    train_paths = [e.path for e in original if e.split == "train"]
    generated = [entry(p + ".gen.png", e.label, provenance="diffusion", source=p)
                 for p, e in zip(train_paths, original)
                 for _ in range(1)][:60]
    generated = [entry(f"gen/{i}.png",
                       "class0" if i % 2 == 0 else "class1",
                       provenance="superres", source=train_paths[i])
                 for i in range(60)]
    merged = merge_and_resplit(original, generated, (0.8, 0.2), seed=0)
    counts = {s: sum(e.split == s for e in merged) for s in ("train", "valid", "test")}
    # pool = 160 train originals + 60 generated; untouched eval = 20+20
    assert counts == {"train": 176, "valid": 44, "test": 40}
    # the held-out images stay exactly the held-out originals
    eval_paths = {e.path for e in merged if e.split == "test"}
    assert eval_paths == {e.path for e in original if e.split in ("valid", "test")}
    assert all(e.provenance == "original" for e in merged if e.split == "test")


def test_merge_rejects_generated_from_heldout():
    original = stratified_split(flat_entries(10), (0.8, 0.1, 0.1), seed=0)
    valid_path = next(e.path for e in original if e.split == "valid")
    rogue = [entry("gen/rogue.png", "class0", provenance="diffusion",
                   source=valid_path)]
    with pytest.raises(SplitError):
        merge_and_resplit(original, rogue, (0.8, 0.2), seed=0)


def test_merge_rejects_unknown_source():
    original = stratified_split(flat_entries(10), (0.8, 0.1, 0.1), seed=0)
    rogue = [entry("gen/rogue.png", "class0", provenance="diffusion",
                   source="img/never_existed.png")]
    with pytest.raises(SplitError):
        merge_and_resplit(original, rogue, (0.8, 0.2), seed=0)


# -- image io ----------------------------------------------------------------

def test_decode_image_rgb(tmp_path):
    arr = np.random.default_rng(1).integers(0, 256, size=(5, 7, 3))
    path = tmp_path / "img.png"
    save_png(path, arr)
    out = decode_image(path)
    assert out.shape == (3, 5, 7)
    np.testing.assert_allclose(out, arr.transpose(2, 0, 1) / 255.0, atol=1e-12)


def test_decode_image_rejects_grayscale(tmp_path):
    arr = np.random.default_rng(2).integers(0, 256, size=(4, 4))
    path = tmp_path / "gray.png"
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)
    with pytest.raises(ImageFormatError):
        decode_image(path)


def test_decode_image_tensor_sidecar(tmp_path):
    from dvit.tensor import dump_tensors
    img = np.random.default_rng(20).random((3, 5, 5))
    path = tmp_path / "raw.tensors"
    dump_tensors(path, {"image": img})
    np.testing.assert_array_equal(decode_image(path), img)
    dump_tensors(tmp_path / "bad.tensors", {"other": img})
    with pytest.raises(ImageFormatError):
        decode_image(tmp_path / "bad.tensors")


def test_decode_image_rejects_garbage(tmp_path):
    path = tmp_path / "noise.png"
    path.write_bytes(b"not an image at all")
    with pytest.raises(ImageFormatError):
        decode_image(path)


def test_resize_bilinear_identity():
    img = np.random.default_rng(3).random((3, 8, 8))
    np.testing.assert_array_equal(resize_bilinear(img, 8), img)


def test_resize_bilinear_hand_values():
    # doubling a 2x2 ramp: half-pixel centers, borders clamped
    img = np.array([[[0.0, 1.0], [2.0, 3.0]]])
    out = resize_bilinear(img, 4)
    assert out.shape == (1, 4, 4)
    np.testing.assert_allclose(out[0, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-12)
    np.testing.assert_allclose(out[0, :, 0], [0.0, 0.5, 1.5, 2.0], atol=1e-12)
    np.testing.assert_allclose(out[0, 3, 3], 3.0, atol=1e-12)


def test_decode_and_normalize(tmp_path):
    arr = np.full((6, 6, 3), 128, dtype=np.uint8)
    path = tmp_path / "gray128.png"
    save_png(path, arr)
    spec = NormalizationSpec(size=6)
    out = decode_and_normalize(path, spec)
    assert out.shape == (3, 6, 6)
    expected = (128 / 255.0 - np.array(spec.mean)) / np.array(spec.std)
    np.testing.assert_allclose(out.data[:, 0, 0], expected, atol=1e-12)


def test_normalization_spec_validation():
    with pytest.raises(ValueError):
        NormalizationSpec(std=(0.0, 0.2, 0.2))
    with pytest.raises(ValueError):
        NormalizationSpec(size=0)


# -- edges -------------------------------------------------------------------

def test_canny_vertical_step_gives_single_line():
    img = np.zeros((24, 24))
    img[:, 12:] = 200.0
    edges = canny_edges(img)
    assert isinstance(edges, EdgeMap)
    assert edges.mask.dtype == np.uint8
    cols = np.unique(np.nonzero(edges.mask)[1])
    assert len(cols) == 1  # thinned to one pixel wide
    assert 10 <= cols[0] <= 13
    assert (edges.mask[:, cols[0]] == 1).all()


def test_canny_flat_image_has_no_edges():
    assert canny_edges(np.full((16, 16), 77.0)).mask.sum() == 0


def test_canny_thresholds_gate_weak_edges():
    img = np.zeros((16, 16))
    img[:, 8:] = 30.0  # a weak step
    strong = canny_edges(img, low=100.0, high=150.0)
    weak = canny_edges(img, low=5.0, high=10.0)
    assert strong.mask.sum() == 0
    assert weak.mask.sum() > 0


def test_canny_hysteresis_keeps_connected_weak_pixels():
    # diagonal gradient ramp: a strong segment should pull its weak
    # 8-connected continuation in, while isolated weak pixels stay out
    rng = np.random.default_rng(4)
    img = np.zeros((32, 32))
    img[:, 16:] = 120.0
    img[:16, 16:] += 100.0  # top half crosses high, bottom stays between
    edges = canny_edges(img, low=100.0, high=260.0)
    rows = np.nonzero(edges.mask)[0]
    assert rows.max() > 16  # weak pixels connected to the strong run survive


def test_edge_map_png_round_trip(tmp_path):
    img = np.zeros((16, 16))
    img[:, 8:] = 200.0
    edges = canny_edges(img)
    blob = edges.to_png_bytes()
    assert blob[:8] == b"\x89PNG\r\n\x1a\n"
    decoded = np.asarray(Image.open(__import__("io").BytesIO(blob)))
    np.testing.assert_array_equal(decoded > 0, edges.mask > 0)


def test_canny_validates_input():
    with pytest.raises(ValueError):
        canny_edges(np.zeros((2, 2)), low=150.0, high=100.0)
    with pytest.raises(ValueError):
        canny_edges(np.zeros((3, 3, 3)))


# -- endpoints ---------------------------------------------------------------

class _Handler(http.server.BaseHTTPRequestHandler):
    requests = []
    fail_first = 0

    def do_POST(self):
        body = self.rfile.read(int(self.headers["Content-Length"]))
        type(self).requests.append((dict(self.headers), json.loads(body)))
        if type(self).fail_first > 0:
            type(self).fail_first -= 1
            self.send_error(500)
            return
        payload = json.dumps({"prompt": "a riverbank seen from above"}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def http_endpoint(monkeypatch):
    server = http.server.HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _Handler.requests = []
    _Handler.fail_first = 0
    url = f"http://127.0.0.1:{server.server_port}/api"
    monkeypatch.setenv("DVIT_API_TOKEN", "sekret")
    yield url
    server.shutdown()


def test_http_endpoint_posts_json_with_bearer(http_endpoint):
    client = HttpEndpoint(EndpointConfig(url=http_endpoint, backoff=0.01))
    out = client.post_json({"image": "abc", "prompt": "", "edges": ""})
    assert out == {"prompt": "a riverbank seen from above"}
    headers, body = _Handler.requests[-1]
    assert headers["Authorization"] == "Bearer sekret"
    assert body["image"] == "abc"


def test_http_endpoint_retries_then_succeeds(http_endpoint):
    _Handler.fail_first = 2
    client = HttpEndpoint(EndpointConfig(url=http_endpoint, retries=3, backoff=0.01))
    out = client.post_json({"image": "", "prompt": "", "edges": ""})
    assert "prompt" in out
    assert len(_Handler.requests) == 3


def test_http_endpoint_gives_up_after_retries(http_endpoint):
    _Handler.fail_first = 99
    client = HttpEndpoint(EndpointConfig(url=http_endpoint, retries=2, backoff=0.01))
    with pytest.raises(EndpointError):
        client.post_json({"image": "", "prompt": "", "edges": ""})
    assert len(_Handler.requests) == 2


def test_http_endpoint_requires_url():
    with pytest.raises(ValueError):
        HttpEndpoint(EndpointConfig(url=None))


def test_request_parsers_validate_fields():
    class Bad:
        def post_json(self, payload):
            return {"unexpected": 1}

    with pytest.raises(EndpointParseError):
        request_caption(b"png", Bad())
    with pytest.raises(EndpointParseError):
        request_superres(b"png", Bad())

    class BadB64:
        def post_json(self, payload):
            return {"image": "!!! not base64 !!!"}

    edges = EdgeMap(mask=np.zeros((4, 4), dtype=np.uint8), low=100.0, high=150.0)
    with pytest.raises(EndpointParseError):
        request_generation("p", edges, b"png", BadB64())


def test_mock_clients_are_deterministic():
    gen = MockGenerationClient()
    a = gen.post_json({"prompt": "river", "edges": "AAA"})
    b = gen.post_json({"prompt": "river", "edges": "AAA"})
    c = gen.post_json({"prompt": "field", "edges": "AAA"})
    assert a == b
    assert a != c


# -- augmentation ------------------------------------------------------------

@pytest.fixture
def small_dataset(tmp_path):
    rng = np.random.default_rng(5)
    entries = []
    for c, split in (("river", "train"), ("river", "train"), ("field", "train"),
                     ("field", "valid")):
        i = len(entries)
        path = tmp_path / f"{c}_{i}.png"
        save_png(path, rng.integers(0, 256, size=(24, 24, 3)))
        entries.append(entry(str(path), c, split))
    return entries


def test_augment_dataset_writes_generated_files(small_dataset, tmp_path):
    out_dir = tmp_path / "generated"
    generated, quarantined = augment_dataset(small_dataset, out_dir,
                                             AugmentClients.mocks())
    assert quarantined == []
    # three train originals, each: one superres + two diffusion
    assert len(generated) == 9
    by_prov = {p: sum(g.provenance == p for g in generated)
               for p in ("superres", "diffusion")}
    assert by_prov == {"superres": 3, "diffusion": 6}
    for g in generated:
        assert g.split == "-"
        assert g.source_id in {e.path for e in small_dataset}
        assert decode_image(g.path).shape[0] == 3


def test_augment_dataset_is_deterministic(small_dataset, tmp_path):
    a, _ = augment_dataset(small_dataset, tmp_path / "a", AugmentClients.mocks())
    b, _ = augment_dataset(small_dataset, tmp_path / "b", AugmentClients.mocks())
    blobs_a = [open(g.path, "rb").read() for g in a]
    blobs_b = [open(g.path, "rb").read() for g in b]
    assert blobs_a == blobs_b


def test_augment_dataset_quarantines_failures(small_dataset, tmp_path):
    class Flaky:
        def __init__(self):
            self.calls = 0
            self.inner = MockCaptionClient()

        def post_json(self, payload):
            self.calls += 1
            if self.calls == 1:
                raise EndpointError("caption service melted")
            return self.inner.post_json(payload)

    clients = AugmentClients(caption=Flaky(), generation=MockGenerationClient(),
                             superres=MockSuperresClient())
    generated, quarantined = augment_dataset(small_dataset, tmp_path / "g", clients)
    assert len(quarantined) == 1
    assert quarantined[0].split == "train"
    # the two surviving train entries still produced their three images each
    assert len(generated) == 6


def test_augment_toggles(small_dataset, tmp_path):
    only_sr, _ = augment_dataset(small_dataset, tmp_path / "sr",
                                 AugmentClients.mocks(), diffusion=False)
    assert {g.provenance for g in only_sr} == {"superres"}
    only_diff, _ = augment_dataset(small_dataset, tmp_path / "diff",
                                   AugmentClients.mocks(), superres=False,
                                   diffusion_per_image=1)
    assert {g.provenance for g in only_diff} == {"diffusion"}
    assert len(only_diff) == 3


def test_ablation_manifests_four_distinct(small_dataset, tmp_path):
    split_entries = stratified_split(small_dataset, (0.5, 0.25, 0.25), seed=0)
    generated, _ = augment_dataset(split_entries, tmp_path / "g",
                                   AugmentClients.mocks())
    tables = ablation_manifests(split_entries, generated, seed=0)
    assert set(tables) == {"baseline", "superres", "diffusion",
                           "superres+diffusion"}
    fingerprints = {name: tuple(sorted(e.path for e in rows))
                    for name, rows in tables.items()}
    assert len(set(fingerprints.values())) == 4
    assert all(g.provenance != "diffusion"
               for g in tables["superres"] if g.split == "train")
