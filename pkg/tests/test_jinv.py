import itertools

import numpy as np
import pytest

from voldenoise.autograd import layers as L
from voldenoise.autograd.tensor import Tensor
from voldenoise.bsn import NetworkSpec, Node, build_network
from voldenoise.jinv import OffsetSet, lift, perturbation_test, static_footprint

SMALL = NetworkSpec(base_channels=4, attention=False)


def conv_node(name, src, k, d=1, mask_center=0, c=1):
    return Node(name, "conv", (src,), {"cin": c, "cout": c, "k": k, "dilation": d, "groups": 1,
                                        "mask_center": mask_center})


def chain(n_dilated, first_k=5, first_c=3):
    nodes = [Node("input", "input", (), {}), conv_node("c0", "input", first_k, 1, first_c)]
    for i in range(n_dilated):
        nodes.append(conv_node(f"c{i + 1}", nodes[-1].name, 3, 3))
    return nodes


def run_chain(nodes, seed=0):
    """Evaluate a conv-only node list with random weights (test-local runner)."""
    rng = np.random.default_rng(seed)
    params = {}
    for n in nodes[1:]:
        a = n.attrs
        params[n.name] = (rng.standard_normal((a["cout"], a["cin"], a["k"], a["k"], a["k"])),
                          L.central_mask(a["k"], a["mask_center"]) if a["mask_center"] else None)

    def fn(x):
        t = Tensor(np.asarray(x, dtype=np.float64))
        for n in nodes[1:]:
            w, m = params[n.name]
            t = L.conv3d(t, Tensor(w), None, dilation=n.attrs["dilation"], mask=m)
        return t
    return fn


def enumerate_footprint(n_dilated):
    """Exhaustive Minkowski enumeration with python sets."""
    ring = {o for o in itertools.product(range(-2, 3), repeat=3) if max(map(abs, o)) == 2}
    step = set(itertools.product((-3, 0, 3), repeat=3))
    out = ring
    for _ in range(n_dilated):
        out = {tuple(a + b for a, b in zip(f, s)) for f in out for s in step}
    return out


class TestOffsetSet:
    def test_minkowski_matches_sets(self, rng):
        a = [tuple(p) for p in rng.integers(-3, 4, size=(6, 3))]
        b = [tuple(p) for p in rng.integers(-2, 3, size=(5, 3))]
        got = {tuple(o) for o in OffsetSet.from_offsets(a).minkowski(b).offsets()}
        want = {tuple(x + y for x, y in zip(p, q)) for p in a for q in b}
        assert got == want

    def test_union_and_global(self):
        s = OffsetSet.from_offsets([(1, 0, 0)]).union(OffsetSet.from_offsets([(0, 2, 0)]).with_global())
        assert len(s) == 2 and s.is_global
        assert (0, 2, 0) in s and (0, 0, 0) not in s

    def test_lift_scale(self):
        np.testing.assert_array_equal(lift([(1, -1, 0)], (("scale", 3),)), [[3, -3, 0]])

    def test_lift_strided_congruent(self):
        # lifted offsets keep the residue mod v of the level-1 offset
        for o in range(-8, 9):
            for p in lift([(o, 0, 0)], (("strided", 3),)):
                assert (p[0] - o) % 3 == 0


class TestStatic:
    def test_single_masked_conv_ring(self):
        rep = static_footprint(chain(0))
        got = {tuple(o) for o in rep.footprint.offsets()}
        want = {o for o in itertools.product(range(-2, 3), repeat=3) if max(map(abs, o)) == 2}
        assert got == want
        assert rep.verdict == "exact"

    @pytest.mark.parametrize("depth", [1, 2, 3])
    def test_dilated_chain_matches_enumeration(self, depth):
        rep = static_footprint(chain(depth))
        assert {tuple(o) for o in rep.footprint.offsets()} == enumerate_footprint(depth)
        assert (0, 0, 0) not in enumerate_footprint(depth)
        assert rep.verdict == "exact"

    def test_unmasked_conv_violated(self):
        nodes = chain(1) + [conv_node("plain", "c1", 3, 1)]
        rep = static_footprint(nodes)
        assert rep.verdict == "violated" and rep.zero_reachable
        assert "plain" in rep.explanation

    def test_unknown_op(self):
        nodes = [Node("input", "input", (), {}), Node("x", "fft", ("input",), {})]
        with pytest.raises(ValueError, match="unknown layer kind"):
            static_footprint(nodes)

    def test_monotone_in_chain(self):
        prev = static_footprint(chain(0)).footprint
        for depth in range(1, 4):
            cur = static_footprint(chain(depth)).footprint
            assert prev.issubset(cur)
            prev = cur

    def test_monotone_in_blocks(self):
        a = static_footprint(SMALL.replace(mid_blocks=1)).footprint
        b = static_footprint(SMALL.replace(mid_blocks=2)).footprint
        assert a.issubset(b) and len(b) >= len(a)

    def test_default_blind_set(self):
        rep = static_footprint(SMALL)
        blind = {tuple(o) for o in rep.blind_near}
        assert (0, 0, 0) in blind
        assert len(rep.blind_near) == 27
        assert rep.verdict == "exact"

    @pytest.mark.parametrize("change,verdict", [
        ({"attention": True}, "bounded-leak"),
        ({"norm": "sample"}, "bounded-leak"),
        ({"downsample": "maxpool"}, "violated"),
        ({"downsample": "block"}, "violated"),
        ({"mask_center": 0}, "violated"),
        ({"block": "dbsn"}, "exact"),
        ({"mask_kernel": 3, "mask_center": 1}, "exact"),
    ])
    def test_spec_verdicts(self, change, verdict):
        assert static_footprint(SMALL.replace(**change)).verdict == verdict


class TestPerturbation:
    def test_identity_violated(self):
        rep = perturbation_test(lambda x: x, shape=(9, 9, 9), n_samples=20, delta=10.0)
        assert rep.verdict == "violated"
        np.testing.assert_allclose([m for _, m in rep.samples], 10.0, rtol=1e-6)

    def test_masked_chain_exact(self):
        rep = perturbation_test(run_chain(chain(2)), shape=(18, 18, 18), n_samples=40)
        assert rep.verdict == "exact" and rep.max_self_dependence == 0.0

    def test_unmasked_chain_violated(self):
        nodes = chain(1) + [conv_node("plain", "c1", 3, 1)]
        rep = perturbation_test(run_chain(nodes), shape=(18, 18, 18), n_samples=20)
        assert rep.verdict == "violated"

    def test_deterministic(self):
        fn = run_chain(chain(1))
        a = perturbation_test(fn, shape=(9, 9, 9), n_samples=10, seed=4)
        b = perturbation_test(fn, shape=(9, 9, 9), n_samples=10, seed=4)
        assert a.samples == b.samples

    def test_statistical_bound(self):
        def sample_mean(x):
            return x * 0 + x.mean(axis=(1, 2, 3, 4), keepdims=True)

        rep = perturbation_test(sample_mean, shape=(9, 9, 9), n_samples=10, mode="statistical", delta=1.0)
        # the mean moves by delta / N, far below beta * delta / N
        assert rep.verdict == "bounded-leak"
        assert rep.bound == pytest.approx(100.0 / 729)

    def test_report_text(self):
        rep = perturbation_test(run_chain(chain(1)), shape=(9, 9, 9), n_samples=5)
        text = rep.to_text()
        assert "verdict=exact" in text and "samples=5" in text

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            perturbation_test(lambda x: x, mode="loose")


class TestAgreement:
    @pytest.mark.parametrize("change", [
        {}, {"block": "dbsn"}, {"mask_kernel": 3, "mask_center": 1},
        {"downsample": "maxpool"}, {"downsample": "block"}, {"mask_center": 0}, {"dca_dilation": 2},
    ])
    def test_static_matches_empirical(self, change):
        spec = SMALL.replace(**change)
        static = static_footprint(spec).verdict
        net = build_network(spec, 1, require_blind_spot=False)
        emp = perturbation_test(net, shape=(27, 27, 27), n_samples=48, seed=2).verdict
        assert static in ("exact", "violated")
        assert emp == static
