"""Smoke test for the pyramid_memory_py extension module.

Build the module first:

    cargo build -p pyramid-memory-py --release --features extension-module

then run `python3 python/smoke_test.py`. If the module is not importable,
the script loads the freshly built shared library from target/.
"""

import importlib.util
import os
import random
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module():
    try:
        import pyramid_memory_py

        return pyramid_memory_py
    except ImportError:
        pass
    for profile in ("release", "debug"):
        built = os.path.join(ROOT, "target", profile, "libpyramid_memory_py.so")
        if os.path.exists(built):
            staged = os.path.join(tempfile.mkdtemp(), "pyramid_memory_py.so")
            shutil.copy(built, staged)
            spec = importlib.util.spec_from_file_location("pyramid_memory_py", staged)
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            return module
    sys.exit("pyramid_memory_py is not built; see the module docstring")


def random_grid(rng, h, w, d):
    return [[[rng.gauss(0.0, 1.0) for _ in range(d)] for _ in range(w)] for _ in range(h)]


def main():
    pm = load_module()
    rng = random.Random(0)

    online = pm.BankConfig.online(4)
    report = pm.validate_config(online)
    assert report["ok"] and report["total_budget"] == 832, report
    assert pm.BankConfig.offline(4).token_budget() == 9984
    with open(os.path.join(ROOT, "configs", "online.cfg")) as f:
        assert pm.BankConfig.parse(f.read()).token_budget() == 832
    swapped = online.with_override("layer.2.rate_fps=1")
    assert not swapped.validate()["ok"]

    grid = random_grid(rng, 16, 16, 4)
    pooled = pm.avg_pool2d(grid, 4, 4)
    assert len(pooled) == 4 and len(pooled[0]) == 4 and len(pooled[0][0]) == 4
    manual = sum(grid[y][x][0] for y in range(4) for x in range(4)) / 16
    assert abs(pooled[0][0][0] - manual) < 1e-5
    assert abs(pm.pooled_pair_similarity(grid, grid) - 1.0) < 1e-9
    assert abs(pm.cosine_similarity([1.0, 0.0], [0.0, 2.0])) < 1e-12
    try:
        pm.cosine_similarity([0.0, 0.0], [1.0, 0.0])
        raise AssertionError("zero vector accepted")
    except ValueError:
        pass

    bank = pm.PyramidMemoryBank(online)
    cache = pm.CacheState()
    peak = 0
    for tick in range(400):
        for event in bank.ingest(tick, random_grid(rng, 16, 16, 4)):
            cache.sync(event)
        assert cache.is_consistent(bank)
        cache.catch_up(bank)
        peak = max(peak, bank.token_count())
    assert peak <= bank.budget() == 832
    assert cache.token_count() == bank.token_count()
    assert cache.tokens_appended - cache.tokens_erased == cache.token_count()
    assert len(bank.layer_ticks(1)) == 2 and len(bank.layer_ticks(3)) == 12
    assert any(e.cascade_depth >= 2 for e in bank.sync_log())
    ticks = [f.tick for f in bank.readout()]
    assert ticks == sorted(ticks)

    stream = pm.Stream.generate(seed=7, duration_s=40, scene_count=4, depth=4)
    assert len(stream) == 320 and stream.shape == (16, 16, 4)
    assert [s[1] for s in stream.scenes] == [0, 80, 160, 240]
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "s.pmbs")
        size = stream.save(path)
        assert size == os.path.getsize(path)
        assert pm.Stream.load(path) == stream
    raw = bytearray(stream.to_bytes())
    raw[:4] = b"JUNK"
    try:
        pm.Stream.from_bytes(bytes(raw))
        raise AssertionError("corrupt stream accepted")
    except ValueError as e:
        assert "bad magic" in str(e)

    fifo = pm.Policy("fifo", online)
    assert fifo.budget() == 768
    for tick in range(0, 80, 4):
        fifo.ingest(tick, stream.frame(tick)[1])
    assert fifo.readout_ticks() == [68, 72, 76]
    assert pm.Policy("none", online).budget() is None

    queries = [80 * k for k in range(1, 5)]
    results = {
        name: pm.run_protocol(stream, online, name, queries)
        for name in ("pyramid", "fifo", "token-merge")
    }
    assert results["pyramid"]["peak_tokens"] <= 832
    assert results["pyramid"]["mean_recall"] >= results["fifo"]["mean_recall"]
    sliding = pm.run_protocol(stream, online, "none", [320], protocol="sliding")
    assert sliding["queries"][0][1] == 64

    print("smoke test passed:", {k: round(v["mean_recall"], 3) for k, v in results.items()})


if __name__ == "__main__":
    main()
