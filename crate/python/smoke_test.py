"""Smoke test for the qemb_py extension. Run with pytest or directly."""

import math

import qemb_py as q


def test_quantizer_cells():
    cfg = q.QuantConfig(0.5)
    assert cfg.index(0.74) == 1
    assert cfg.value(1) == 0.75
    assert cfg.index(-0.01) == -1


def test_operator_matches_dense_rows():
    op = q.LinOp("bernoulli", 6, 5, seed=3)
    x = [1.0, -2.0, 0.5, 0.0, 3.0]
    rows = op.dense()
    expected = [sum(a * b for a, b in zip(row, x)) for row in rows]
    assert all(abs(u - v) < 1e-12 for u, v in zip(op.matvec(x), expected))
    assert op.profile == (2.0, 2.0)


def test_embed_roundtrip_and_zero_distance():
    op = q.LinOp("gaussian", 32, 16, seed=1)
    cfg = q.QuantConfig(0.25)
    xi = q.sample_dither(32, cfg, seed=2)
    x = [math.sin(i) for i in range(16)]
    c = q.embed(op, x, xi, cfg).with_seeds(1, 2)
    back = q.deserialize(q.serialize(c))
    assert back == c
    assert back.op_seed == 1 and back.dither_seed == 2
    assert q.estimate_distance(c, back, "l1") == 0.0

    pairs = q.sample_dither(32, cfg, seed=5, bidither=True)
    b = q.embed_bidither(op, x, pairs, cfg)
    assert b.layout == "bidither"
    assert q.estimate_distance(b, b, "circ") == 0.0


def test_required_m_and_entropy():
    assert q.required_m("p1", "sparse:4:1024", 0.1, 1.0) == 13885
    h = q.ModelSet("sparse:4:1024").entropy_bound(0.01)
    assert abs(h - 4 * math.log(math.e * 256) * math.log(201)) < 1e-9


def test_errors_become_python_exceptions():
    try:
        q.QuantConfig(-1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("negative delta accepted")
    try:
        q.deserialize(b"nope")
    except ValueError:
        pass
    else:
        raise AssertionError("garbage decoded")


def test_qrip_sweep_and_selftest():
    op = q.LinOp("gaussian", 256, 64, seed=4, profile=(1.0, 2.0))
    model = q.ModelSet("sparse:3:64", radius=5.0)
    records, summary, eps = q.measure_qrip(op, model, q.QuantConfig(1.0), "l1", [0.5, 2.0], pairs=3, dithers=2, seed=7)
    assert len(records) == 2 * 3 * 2
    assert [row[0] for row in summary] == [0.5, 2.0]
    assert 0.0 <= eps < 1.0
    assert all(passed for _, passed, _ in q.selftest(3))


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print("ok", name)
