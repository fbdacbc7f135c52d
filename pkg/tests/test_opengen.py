import base64
import io
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from PIL import Image

from odgclip.errors import DataError, OpenGenUnavailable
from odgclip.opengen import (GenRequest, build_prompts, filter_pool, generate_open_pool, grayscale_entropy,
                             make_diffusion_client, make_stub_generator)


def test_prompts():
    pos, neg = build_prompts("sketch", ["dog", "cat"])
    assert pos == "a sketch of an unknown class" and neg == ["dog", "cat"]
    assert build_prompts("sketch", ["dog"], pp_only=True)[1] == []
    with pytest.raises(DataError):
        build_prompts("", ["dog"])
    with pytest.raises(DataError):
        build_prompts("art", [])


def test_entropy_oracles():
    assert grayscale_entropy(np.full((16, 16, 3), 0.4)) == 0.0
    two = np.zeros((16, 16, 3))
    two[:8] = 1.0
    assert grayscale_entropy(two) == pytest.approx(0.125, abs=1e-6)
    ramp = np.repeat(np.arange(256)[None, :, None] / 255.0, 3, axis=2)
    assert grayscale_entropy(ramp) == pytest.approx(1.0, abs=1e-12)


def test_entropy_uses_luminance_weights():
    img = np.zeros((2, 1, 3))
    img[0, 0] = [1, 0, 0]  # luminance 0.299 -> level 76
    img[1, 0] = [0, 0, 1]  # luminance 0.114 -> level 29
    assert grayscale_entropy(img) == pytest.approx(1 / 8)


def test_filter_rejects_constant():
    pool = filter_pool([np.full((8, 8, 3), 0.5), np.random.default_rng(0).random((8, 8, 3))], 0.2, ["a", "b"])
    assert len(pool) == 1 and pool.samples[0].domain == "b"
    assert pool.acceptance_rate == 0.5
    with pytest.raises(ValueError):
        filter_pool([], 1.5)


def test_stub_pass_rate_and_determinism(stub):
    req = GenRequest("a photo of an unknown class", ("dog",), 50, 3, "photo")
    a = stub.generate(req)
    assert np.array_equal(a[0], stub.generate(req)[0])
    pool = filter_pool(a, 0.2)
    assert pool.acceptance_rate > 0.9
    assert all(im.shape == (32, 32, 3) and 0 <= im.min() and im.max() <= 1 for im in a)


def test_pool_cache_hit(tmp_path, stub):
    class Counting:
        calls = 0

        def generate(self, req):
            Counting.calls += 1
            return stub.generate(req)

    gen = Counting()
    p1, m1 = generate_open_pool(gen, ["art", "photo"], ["dog"], 6, seed=1, cache_dir=tmp_path)
    assert Counting.calls == 2
    p2, m2 = generate_open_pool(gen, ["art", "photo"], ["dog"], 6, seed=1, cache_dir=tmp_path)
    assert Counting.calls == 2  # served from cache
    assert all(np.array_equal(a.image, b.image) for a, b in zip(p1.samples, p2.samples))
    assert m1["accepted"] == m2["accepted"] and m2["pp_only"] is False
    man = json.loads((tmp_path / "art" / "1" / "manifest.json").read_text())
    assert len(man["images"]) == 6 and all("entropy" in e for e in man["images"])
    # a different negative list invalidates the cache entry
    generate_open_pool(gen, ["art"], ["cat"], 6, seed=1, cache_dir=tmp_path)
    assert Counting.calls == 3


def test_pool_manifest_pp_only(stub):
    pool, man = generate_open_pool(stub, ["art"], ["dog"], 4, seed=0, pp_only=True)
    assert man["pp_only"] is True and man["domains"][0]["negatives"] == []
    assert {s.domain for s in pool.samples} <= {"art"}


def _png_b64(color):
    buf = io.BytesIO()
    Image.fromarray(np.full((8, 8, 3), color, dtype=np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


class _Server:
    def __init__(self, responses):
        self.responses = list(responses)
        self.bodies = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                outer.bodies.append((self.path, body))
                code, payload = outer.responses.pop(0) if len(outer.responses) > 1 else outer.responses[0]
                raw = payload.encode() if isinstance(payload, str) else json.dumps(payload).encode()
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

            def log_message(self, *args):
                pass

        self.httpd = HTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_port}"
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


def test_diffusion_client_roundtrip():
    ok = (200, {"images": [_png_b64(10), _png_b64(200)]})
    with _Server([ok]) as srv:
        client = make_diffusion_client(srv.url, backoff=0.0)
        imgs = client.generate(GenRequest("a photo of an unknown class", ("dog", "cat"), 2, 5, "photo"))
    assert len(imgs) == 2 and imgs[0].shape == (8, 8, 3)
    assert imgs[1][0, 0, 0] == pytest.approx(200 / 255)
    path, body = srv.bodies[0]
    assert path == "/sdapi/v1/txt2img"
    assert body["negative_prompt"] == "dog, cat" and body["seed"] == 5 and body["batch_size"] == 2
    assert body["cfg_scale"] == 7.5


def test_diffusion_client_retries_then_succeeds():
    with _Server([(503, {}), (200, {"images": [_png_b64(50)]})]) as srv:
        client = make_diffusion_client(srv.url, retries=2, backoff=0.0)
        assert len(client.generate(GenRequest("p", (), 1, 0, "art"))) == 1
    assert len(srv.bodies) == 2


def test_diffusion_client_unavailable():
    with _Server([(500, {})]) as srv:
        client = make_diffusion_client(srv.url, retries=1, backoff=0.0)
        with pytest.raises(OpenGenUnavailable):
            client.generate(GenRequest("p", (), 1, 0, "art"))
    assert len(srv.bodies) == 2


@pytest.mark.parametrize("payload", [{"nope": []}, {"images": ["!!notbase64png"]}, {"images": []}])
def test_diffusion_client_malformed(payload):
    with _Server([(200, payload)]) as srv:
        client = make_diffusion_client(srv.url, retries=0, backoff=0.0)
        with pytest.raises(DataError):
            client.generate(GenRequest("p", (), 1, 0, "art"))


def test_diffusion_client_field_renames():
    with _Server([(200, {"out": [_png_b64(1)]})]) as srv:
        client = make_diffusion_client(srv.url, path="/gen", fields={"prompt": "text", "images": "out"})
        client.generate(GenRequest("hello", (), 1, 0, "art"))
    path, body = srv.bodies[0]
    assert path == "/gen" and body["text"] == "hello" and "prompt" not in body
