"""Selective state-space scan: discretization identities, fused kernel vs the
step-by-step oracle, stability, gradients."""

import math

import numpy as np
import pytest

from restoscan import sscan as S
from restoscan import tensor as T
from restoscan.errors import DimensionError, NumericError

rng = np.random.default_rng(77)


def make_params(cg=3, ns=4, seed=0, dtype=np.float64, simplified_b=False):
    return S.init_ssm_params(cg, ns, np.random.default_rng(seed),
                             dtype=dtype, simplified_b=simplified_b)


# ---------------------------------------------------------------------------
# Discretization
# ---------------------------------------------------------------------------

def test_discretize_scalar_frozen():
    # delta = ln 2, a = -1, b = 1:
    #   Abar = exp(-ln 2) = 1/2;  Bbar = (Abar - 1)/a * b = 1/2.
    d = T.Tensor([[math.log(2.0)]], dtype=np.float64)
    a = T.Tensor([[-1.0]], dtype=np.float64)
    b = T.Tensor([[1.0]], dtype=np.float64)
    abar, bbar = S.discretize(d, a, b)
    assert abs(abar.data[0, 0, 0] - 0.5) < 1e-15
    assert abs(bbar.data[0, 0, 0] - 0.5) < 1e-15


def test_discretize_matches_naive_form():
    d = T.Tensor(rng.uniform(1e-3, 0.5, (6, 3)), dtype=np.float64)
    a = T.Tensor(-rng.uniform(0.5, 4.0, (3, 5)), dtype=np.float64)
    b = T.Tensor(rng.standard_normal((6, 5)), dtype=np.float64)
    abar, bbar = S.discretize(d, a, b)
    z = d.data[:, :, None] * a.data[None]
    assert np.allclose(abar.data, np.exp(z), atol=0, rtol=1e-15)
    naive = (np.exp(z) - 1.0) / a.data[None] * b.data[:, None, :]
    assert np.allclose(bbar.data, naive, rtol=1e-12)


def test_discretize_delta_to_zero():
    # Abar -> 1, Bbar -> delta * b.
    d = T.Tensor(np.full((2, 2), 1e-12), dtype=np.float64)
    a = T.Tensor(np.full((2, 3), -2.0), dtype=np.float64)
    b = T.Tensor(rng.standard_normal((2, 3)), dtype=np.float64)
    abar, bbar = S.discretize(d, a, b)
    assert np.allclose(abar.data, 1.0, atol=1e-11)
    assert np.allclose(bbar.data, 1e-12 * b.data[:, None, :], rtol=1e-9)


def test_discretize_a_to_zero():
    # The (Abar - 1)/a form is 0/0 here; the phi evaluation stays exact.
    d = T.Tensor(rng.uniform(0.01, 0.1, (3, 2)), dtype=np.float64)
    a = T.Tensor(np.full((2, 4), -1e-14), dtype=np.float64)
    b = T.Tensor(rng.standard_normal((3, 4)), dtype=np.float64)
    _, bbar = S.discretize(d, a, b)
    expect = d.data[:, :, None] * b.data[:, None, :]
    assert np.allclose(bbar.data, expect, rtol=1e-12)


def test_discretize_simplified_flag():
    d = T.Tensor(rng.uniform(0.01, 0.5, (4, 2)), dtype=np.float64)
    a = T.Tensor(-rng.uniform(0.5, 2.0, (2, 3)), dtype=np.float64)
    b = T.Tensor(rng.standard_normal((4, 3)), dtype=np.float64)
    _, bbar = S.discretize(d, a, b, simplified=True)
    assert np.array_equal(bbar.data, d.data[:, :, None] * b.data[:, None, :])
    _, exact = S.discretize(d, a, b)
    assert np.abs(bbar.data - exact.data).max() > 1e-4   # genuinely different


def test_discretize_gradients():
    d = T.Tensor(rng.uniform(0.05, 0.5, (4, 3)), dtype=np.float64)
    a = T.Tensor(-rng.uniform(0.2, 3.0, (3, 2)), dtype=np.float64)
    b = T.Tensor(rng.standard_normal((4, 2)), dtype=np.float64)
    m1 = T.Tensor(rng.standard_normal((4, 3, 2)), dtype=np.float64)
    m2 = T.Tensor(rng.standard_normal((4, 3, 2)), dtype=np.float64)

    def loss(which):
        def f(v):
            args = {"d": d, "a": a, "b": b}
            args[which] = v
            abar, bbar = S.discretize(args["d"], args["a"], args["b"])
            return T.sum_all(T.add(T.mul(abar, m1), T.mul(bbar, m2)))
        return f

    for name, var in (("d", d), ("a", a), ("b", b)):
        err = T.grad_check(loss(name), var, step=1e-6)
        assert err < 1e-7, (name, err)


def test_phi_series_consistency():
    # Series and direct branches must agree where they hand over.
    for z in (1e-9, -1e-9, 1e-8, -2e-8, 1e-4, -1e-4, 2e-3, -2e-3):
        za = np.array([z])
        assert np.allclose(S._phi(za), np.expm1(z) / z, rtol=1e-10)
        direct = (np.exp(z) * (z - 1.0) + 1.0) / (z * z)
        series = 0.5 + z / 3.0 + z * z / 8.0
        want = series if abs(z) < 1e-3 else direct
        assert np.allclose(S._dphi(za), want, rtol=1e-9)


# ---------------------------------------------------------------------------
# Fused kernel vs oracle
# ---------------------------------------------------------------------------

def test_fused_matches_reference_oracle():
    worst = 0.0
    for case in range(50):
        r = np.random.default_rng(case)
        cg = int(r.integers(1, 5))
        ns = int(r.integers(1, 6))
        ll = int(r.integers(1, 17))
        p = make_params(cg, ns, seed=case + 100)
        u = T.Tensor(r.standard_normal((ll, cg)), dtype=np.float64)
        got = S.selective_scan_fwd(u, p).data
        ref = S.selective_scan_ref(u, p).data
        worst = max(worst, float(np.max(np.abs(got - ref) / np.maximum(1.0, np.abs(ref)))))
    assert worst < 1e-12, worst


def test_fused_matches_reference_simplified():
    p = make_params(3, 4, seed=5, simplified_b=True)
    u = T.Tensor(rng.standard_normal((12, 3)), dtype=np.float64)
    got = S.selective_scan_fwd(u, p).data
    ref = S.selective_scan_ref(u, p).data
    assert np.allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_causality_prefix_identical():
    p = make_params(3, 4, seed=9)
    u = rng.standard_normal((16, 3))
    full = S.selective_scan_fwd(T.Tensor(u, dtype=np.float64), p).data
    half = S.selective_scan_fwd(T.Tensor(u[:8], dtype=np.float64), p).data
    assert np.array_equal(full[:8], half)     # bitwise: no future leakage


def test_zero_input_zero_output():
    p = make_params(4, 3, seed=2)
    y = S.selective_scan_fwd(T.Tensor(np.zeros((10, 4)), dtype=np.float64), p)
    assert np.array_equal(y.data, np.zeros((10, 4)))


def test_single_step_hand_unroll():
    p = make_params(2, 3, seed=4)
    u = rng.standard_normal((1, 2))
    y = S.selective_scan_fwd(T.Tensor(u, dtype=np.float64), p).data
    ut = u[0]
    delta = np.logaddexp(0.0, ut @ p.delta_w.data + p.delta_b.data)
    a = -np.exp(p.log_neg_a.data)
    bbar = (np.exp(delta[:, None] * a) - 1.0) / a * (ut @ p.b_proj.data)[None]
    h = bbar * ut[:, None]
    want = h @ (ut @ p.c_proj.data) + p.d_skip.data * ut
    assert np.allclose(y[0], want, rtol=1e-13)


def test_skip_only_when_readout_projection_is_zero():
    p = make_params(3, 4, seed=6)
    p.c_proj.data[:] = 0.0
    u = rng.standard_normal((9, 3))
    y = S.selective_scan_fwd(T.Tensor(u, dtype=np.float64), p).data
    assert np.array_equal(y, p.d_skip.data * u)


def test_impulse_state_decay_is_geometric():
    # Constant-Delta configuration: zero the Delta projection so each channel
    # keeps a fixed step size.  After an impulse at t=0 the state contracts by
    # exactly Abar each step.  The readout is zero there because C_t is built
    # from u_t = 0 - that part of the response lives in the state trajectory.
    p = make_params(2, 3, seed=11)
    p.delta_w.data[:] = 0.0
    u = np.zeros((8, 2))
    u[0] = [1.0, -2.0]
    y, states = S.selective_scan_ref(T.Tensor(u, dtype=np.float64), p,
                                     return_states=True)
    delta = np.logaddexp(0.0, p.delta_b.data)
    abar = np.exp(delta[:, None] * -np.exp(p.log_neg_a.data))
    for t in range(1, 8):
        assert np.allclose(states[t], states[0] * abar ** t, rtol=1e-10)
    assert np.array_equal(y.data[1:], np.zeros((7, 2)))


def test_states_bounded_by_geometric_sum():
    # |h_t| <= max|Bbar u| * (1 + q + q^2 + ...) = max|Bbar u| / (1 - q)
    # with q = max Abar < 1; run ten times the usual sequence length.
    p = make_params(3, 4, seed=13)
    ll = 160
    u = rng.standard_normal((ll, 3)) * 3.0
    _, states = S.selective_scan_ref(T.Tensor(u, dtype=np.float64), p,
                                     return_states=True)
    a = -np.exp(p.log_neg_a.data)
    max_abar = 0.0
    max_bu = 0.0
    for t in range(ll):
        ut = u[t]
        delta = np.logaddexp(0.0, ut @ p.delta_w.data + p.delta_b.data)
        abar = np.exp(delta[:, None] * a)
        bbar = (abar - 1.0) / a * (ut @ p.b_proj.data)[None]
        max_abar = max(max_abar, float(abar.max()))
        max_bu = max(max_bu, float(np.abs(bbar * ut[:, None]).max()))
    assert max_abar < 1.0
    bound = max_bu / (1.0 - max_abar)
    assert np.isfinite(states).all()
    assert np.abs(states).max() <= bound * (1 + 1e-12)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def test_scan_gradients_vs_finite_differences():
    p = make_params(2, 3, seed=21)
    u = T.Tensor(rng.standard_normal((6, 2)), dtype=np.float64)
    mix = T.Tensor(rng.standard_normal((6, 2)), dtype=np.float64)

    tensors = {"u": u, "log_neg_a": p.log_neg_a, "b_proj": p.b_proj,
               "c_proj": p.c_proj, "delta_w": p.delta_w,
               "delta_b": p.delta_b, "d_skip": p.d_skip}

    def loss_for(name):
        def f(v):
            saved = tensors[name]
            tensors[name] = v
            try:
                q = S.SsmParams(2, 3, tensors["log_neg_a"], tensors["b_proj"],
                                tensors["c_proj"], tensors["delta_w"],
                                tensors["delta_b"], tensors["d_skip"])
                return T.sum_all(T.mul(S.selective_scan_fwd(tensors["u"], q), mix))
            finally:
                tensors[name] = saved
        return f

    for name, var in tensors.items():
        err = T.grad_check(loss_for(name), var, step=1e-5)
        assert err < 1e-6, (name, err)


def test_scan_gradients_simplified_variant():
    p = make_params(2, 2, seed=23, simplified_b=True)
    u = T.Tensor(rng.standard_normal((5, 2)), dtype=np.float64)
    err = T.grad_check(lambda v: T.sum_all(S.selective_scan_fwd(v, p)), u,
                       step=1e-5)
    assert err < 1e-6


def test_grouped_call_gradient_through_group_axis():
    # Two groups with distinct parameters, gradient wrt the stacked input.
    pa = make_params(2, 3, seed=31)
    pb = make_params(2, 3, seed=32)
    la = T.stack([pa.log_neg_a, pb.log_neg_a], axis=0)
    bp = T.stack([pa.b_proj, pb.b_proj], axis=0)
    cp = T.stack([pa.c_proj, pb.c_proj], axis=0)
    dw = T.stack([pa.delta_w, pb.delta_w], axis=0)
    db = T.stack([pa.delta_b, pb.delta_b], axis=0)
    dk = T.stack([pa.d_skip, pb.d_skip], axis=0)
    u = T.Tensor(rng.standard_normal((5, 2, 2)), dtype=np.float64)
    err = T.grad_check(
        lambda v: T.sum_all(S.scan_groups(v, la, bp, cp, dw, db, dk)), u,
        step=1e-5)
    assert err < 1e-6


# ---------------------------------------------------------------------------
# Batching semantics and failure modes
# ---------------------------------------------------------------------------

def test_groups_are_independent():
    pa = make_params(2, 3, seed=41)
    pb = make_params(2, 3, seed=42)
    u = rng.standard_normal((7, 2, 2))

    def run(u3):
        return S.scan_groups(
            T.Tensor(u3, dtype=np.float64),
            T.stack([pa.log_neg_a, pb.log_neg_a], axis=0),
            T.stack([pa.b_proj, pb.b_proj], axis=0),
            T.stack([pa.c_proj, pb.c_proj], axis=0),
            T.stack([pa.delta_w, pb.delta_w], axis=0),
            T.stack([pa.delta_b, pb.delta_b], axis=0),
            T.stack([pa.d_skip, pb.d_skip], axis=0)).data

    base = run(u)
    poked = u.copy()
    poked[:, 1, :] += 5.0          # disturb group 1 only
    out = run(poked)
    assert np.array_equal(base[:, 0, :], out[:, 0, :])
    assert not np.array_equal(base[:, 1, :], out[:, 1, :])
    # and each group matches its own single-sequence scan
    lone = S.selective_scan_fwd(T.Tensor(u[:, 0, :], dtype=np.float64), pa).data
    assert np.allclose(base[:, 0, :], lone, rtol=1e-14, atol=1e-15)


@pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
def test_nonfinite_state_reports_step():
    p = make_params(2, 2, seed=51, dtype=np.float32)
    u = np.zeros((6, 2), dtype=np.float32)
    u[3] = 1e38                      # overflows the f32 state update at t=3
    with pytest.raises(NumericError, match="step 3"):
        S.selective_scan_fwd(T.Tensor(u), p)


def test_bad_shapes():
    p = make_params(3, 2)
    with pytest.raises(DimensionError):
        S.selective_scan_fwd(T.Tensor(np.zeros((4, 2)), dtype=np.float64), p)
    with pytest.raises(DimensionError):
        S.discretize(T.Tensor(np.zeros((4, 2)), dtype=np.float64),
                     T.Tensor(np.zeros((2, 3)), dtype=np.float64),
                     T.Tensor(np.zeros((5, 3)), dtype=np.float64))


def test_init_reference_properties():
    p = make_params(5, 4, seed=3)
    # A = -(1..Ns) replicated per channel
    assert np.allclose(-np.exp(p.log_neg_a.data),
                       -np.arange(1.0, 5.0)[None, :].repeat(5, 0))
    dt = np.logaddexp(0.0, p.delta_b.data)   # softplus of the bias
    assert (dt >= 1e-3 - 1e-9).all() and (dt <= 0.1 + 1e-9).all()
    assert np.array_equal(p.d_skip.data, np.ones(5))
    assert p.b_proj.shape == (5, 4) and p.delta_w.shape == (5, 5)
    assert np.abs(p.b_proj.data).max() <= 0.04 + 1e-12   # clipped at 2 std
