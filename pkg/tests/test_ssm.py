import numpy as np
import pytest

from patchmoe import tensor as T
from patchmoe.harness.gradcheck import check_gradients, gradcheck
from patchmoe.scan_order import scan_order
from patchmoe.ssm import SsmParams, directional_scan, scan_core, selective_scan
from patchmoe.tensor import ContractError, DimensionError, Param, Tensor

from oracles import ssm_dense


def random_instance(rng, nb=None, nc=None, nt=None, nn=None):
    nb = nb or int(rng.integers(1, 3))
    nc = nc or int(rng.integers(1, 5))
    nt = nt or int(rng.integers(1, 65))
    nn = nn or int(rng.integers(1, 9))
    return dict(
        x=rng.standard_normal((nb, nc, nt)),
        delta=rng.uniform(0.01, 0.5, (nb, nc, nt)),
        A=-rng.uniform(0.2, 3.0, (nc, nn)),
        B=rng.standard_normal((nb, nn, nt)),
        C=rng.standard_normal((nb, nn, nt)),
        D=rng.standard_normal(nc),
    )


def run_core(inst):
    return scan_core(*(Tensor(inst[k]) for k in ("x", "delta", "A", "B", "C", "D"))).data


class TestScanCore:
    def test_matches_dense_kernel_oracle(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(50):
            inst = random_instance(rng)
            ref = ssm_dense(**inst)
            worst = max(worst, float(np.max(np.abs(run_core(inst) - ref))))
        assert worst < 1e-10

    def test_single_step(self):
        # T = 1: h = delta * B * x, y = <C, h> + D x.
        inst = dict(x=np.array([[[2.0]]]), delta=np.array([[[0.5]]]), A=np.array([[-1.0, -2.0]]),
                    B=np.array([[[1.0], [3.0]]]), C=np.array([[[4.0], [-1.0]]]), D=np.array([0.25]))
        assert run_core(inst)[0, 0, 0] == pytest.approx(0.5 * 2 * (4 * 1 - 1 * 3) + 0.5, abs=1e-15)

    def test_shape_errors(self, rng):
        inst = random_instance(rng, 1, 2, 5, 3)
        bad = dict(inst, B=inst["B"][:, :2])
        with pytest.raises(DimensionError):
            run_core(bad)
        with pytest.raises(DimensionError):
            scan_core(Tensor(np.zeros((1, 2, 3, 1))), *(Tensor(np.zeros(1)) for _ in range(5)))

    def test_rejects_non_finite_input(self, rng):
        inst = random_instance(rng, 1, 2, 5, 3)
        inst["x"][0, 0, 2] = np.inf
        with pytest.raises(ContractError):
            run_core(inst)

    def test_gradients_of_all_inputs(self, rng):
        inst = random_instance(rng, 2, 3, 9, 4)
        leaves = {k: Tensor(v, requires_grad=True) for k, v in inst.items()}
        w = Tensor(rng.standard_normal(inst["x"].shape))

        def loss():
            y = scan_core(*(leaves[k] for k in ("x", "delta", "A", "B", "C", "D")))
            return T.sum_all(T.hadamard(y, w))

        report = check_gradients(loss, list(leaves.items()), tolerance=1e-7, trials=12)
        assert report.passed, report.lines()


class TestSelectiveScan:
    def test_impulse_causality_is_exact(self, rng):
        params = SsmParams(3, 4, rng)
        x = rng.standard_normal((1, 3, 20))
        base = selective_scan(Tensor(x), params).data
        for s in (0, 7, 19):
            bumped = x.copy()
            bumped[0, :, s] += 1.0
            out = selective_scan(Tensor(bumped), params).data
            np.testing.assert_array_equal(out[..., :s], base[..., :s])
            assert np.any(out[..., s] != base[..., s])

    def test_pure_skip_is_identity(self, rng):
        x = rng.standard_normal((2, 4, 10))
        np.testing.assert_array_equal(selective_scan(Tensor(x), SsmParams.pure_skip(4, 3)).data, x)

    def test_gates_positive_step_and_negative_decay(self, rng):
        params = SsmParams(4, 3, rng)
        delta, bm, cm = params.gates(Tensor(rng.standard_normal((2, 4, 6))))
        assert delta.shape == (2, 4, 6) and bm.shape == cm.shape == (2, 3, 6)
        assert np.all(delta.data > 0)
        assert np.all(params.A().data < 0)

    def test_initial_step_size_range(self):
        params = SsmParams(16, 4, np.random.default_rng(0))
        dt = np.log1p(np.exp(params.dt_bias.data))
        assert np.all((dt >= 1e-3 - 1e-12) & (dt <= 1e-1 + 1e-12))

    def test_matches_oracle_with_learned_gates(self, rng):
        params = SsmParams(3, 5, rng)
        x = rng.standard_normal((2, 3, 16))
        delta, bm, cm = (g.data for g in params.gates(Tensor(x)))
        ref = ssm_dense(x, delta, params.A().data, bm, cm, params.D.data)
        np.testing.assert_allclose(selective_scan(Tensor(x), params).data, ref, atol=1e-10)

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            selective_scan(Tensor(np.zeros((1, 3, 4))), SsmParams(4, 2, rng))

    def test_single_precision_path(self, rng):
        with T.precision("f32"):
            params = SsmParams(3, 2, rng)
            x = Tensor(rng.standard_normal((1, 3, 12)))
            y = selective_scan(x, params)
            assert y.data.dtype == np.float32
        ref = selective_scan(Tensor(x.data.astype(np.float64)), params)
        np.testing.assert_allclose(y.data, ref.data, rtol=1e-4, atol=1e-5)

    def test_gradcheck_scope(self):
        report = gradcheck("ssm")
        assert report.passed, report.lines()


class TestDirectionalScan:
    def test_raster_row_equals_plain_scan(self, rng):
        params = SsmParams(2, 3, rng)
        x = rng.standard_normal((1, 2, 1, 9))
        out = directional_scan(Tensor(x), scan_order(1, 9, 1, "forward"), params).data
        np.testing.assert_allclose(out[:, :, 0, :], selective_scan(Tensor(x[:, :, 0, :]), params).data, atol=0)

    def test_reverse_scan_is_flipped_forward(self, rng):
        params = SsmParams(2, 3, rng)
        x = rng.standard_normal((1, 2, 4, 4))
        rev = directional_scan(Tensor(x), scan_order(4, 4, 2, "reverse"), params).data
        fwd_order = scan_order(4, 4, 2, "forward")
        seq = x.reshape(1, 2, 16)[..., fwd_order.perm[::-1]]
        ref_seq = selective_scan(Tensor(np.ascontiguousarray(seq)), params).data
        ref = np.empty((1, 2, 16))
        ref[..., fwd_order.perm[::-1]] = ref_seq
        np.testing.assert_allclose(rev, ref.reshape(1, 2, 4, 4), atol=1e-14)

    def test_param_count(self, rng):
        c, n = 6, 4
        assert SsmParams(c, n, rng).num_parameters() == c * c + 3 * n * c + 2 * c
        assert isinstance(SsmParams(c, n, rng).A_log, Param)
