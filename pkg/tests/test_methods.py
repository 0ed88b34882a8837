import copy
import dataclasses
import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from clfno import taskgen
from clfno.fno import FNO, FnoConfig
from clfno.methods import METHODS, make_method
from clfno.methods.base import StageSettings, fit
from clfno.methods.ewc import FisherEntry, ewc_fisher_diag, ewc_penalty, fisher_diagonal
from clfno.methods.gem import agem_project
from clfno.methods.lora import LoraAdapter, attach_adapters, lora_forward
from clfno.methods.lwf import distillation_term, lwf_loss
from clfno.methods.ogd import GradientBasis, basis_update_and_compress, ogd_project
from clfno.methods.piggyback import masked_names, new_mask_set, piggyback_forward
from clfno.methods.replay import ReplayBuffer, kmeans_select, reservoir_select, reservoir_update
from clfno.methods.sle import SleBranch, branch_parameter_count, sle_forward
from clfno.tensor_core import ParamStore

TINY = FnoConfig(hidden_channels=4, num_layers=2, modes=3)


@pytest.fixture(scope="module")
def tasks():
    specs = [dataclasses.replace(s, n_train=6 if i == 0 else 3, n_test=2)
             for i, s in enumerate(taskgen.default_sequence(0, grid=16))]
    return taskgen.generate_sequence(specs)


def _run(name, tasks, epochs=2, hparams=None, seed=0, stages=None):
    method = make_method(name, FNO(TINY, seed=1), hparams or {}, seed=seed)
    for k, ds in enumerate(tasks[:stages]):
        method.begin_task(k, ds)
        fit(method, k, ds, method.settings(epochs), torch.Generator().manual_seed(k))
        method.end_task(k, ds)
    return method


# -- EWC ---------------------------------------------------------------------

def test_fisher_of_scalar_is_squared_gradient():
    theta = torch.tensor(2.0, requires_grad=True)
    store = ParamStore([("t", theta)])
    f = fisher_diagonal(lambda i: 3.0 * theta, store, 1)
    assert float(f["t"]) == 9.0


def test_fisher_averages_squared_gradients():
    theta = torch.tensor(0.0, requires_grad=True)
    store = ParamStore([("t", theta)])
    grads = [1.0, 3.0]
    f = fisher_diagonal(lambda i: grads[i] * theta, store, 2)
    assert float(f["t"]) == 5.0


def test_fisher_nonnegative_and_rejects_negative():
    torch.manual_seed(0)
    model = FNO(TINY).double()
    entry = ewc_fisher_diag(model, torch.randn(3, 7, 8, 8, dtype=torch.float64), torch.randn(3, 1, 8, 8, dtype=torch.float64))
    assert all(bool((f >= 0).all()) for f in entry.fisher.values())
    with pytest.raises(ValueError):
        FisherEntry({"a": -torch.ones(2)}, {"a": torch.zeros(2)})


def test_penalty_matches_brute_force():
    rng = np.random.default_rng(0)
    f1, a1, f2, a2, th = (rng.random(5) for _ in range(5))
    entries = [FisherEntry({"w": torch.tensor(f1)}, {"w": torch.tensor(a1)}),
               FisherEntry({"w": torch.tensor(f2)}, {"w": torch.tensor(a2)})]
    brute = 0.0
    for f, a in ((f1, a1), (f2, a2)):
        for i in range(5):
            brute += f[i] * (th[i] - a[i]) ** 2
    got = float(ewc_penalty({"w": torch.tensor(th)}, entries, 0.7))
    assert got == pytest.approx(0.35 * brute, rel=1e-12)
    assert float(ewc_penalty({"w": torch.tensor(a1)}, entries[:1], 1e9)) == 0.0
    with pytest.raises(ValueError):
        ewc_penalty({"w": torch.zeros(4)}, entries, 1.0)


def test_huge_lambda_pins_parameters(tasks):
    method = _run("ewc", tasks, epochs=1, stages=1)
    anchor = {n: p.clone() for n, p in method.model.named_parameters()}
    method.hp["ewc_lambda"] = 1e12
    method.hp["lr"] = 1e-4
    method.begin_task(1, tasks[1])
    fit(method, 1, tasks[1], method.settings(2), torch.Generator().manual_seed(0))
    fisher = method.entries[0].fisher
    for n, p in method.model.named_parameters():
        important = fisher[n] > 1e-6
        if important.any():
            assert float((p - anchor[n]).detach()[important].abs().max()) < 2e-3, n


# -- LwF ---------------------------------------------------------------------

def test_distillation_matches_elementwise_oracle():
    rng = np.random.default_rng(1)
    s, t, y = (rng.standard_normal((2, 1, 3, 3)) for _ in range(3))
    ref_distill = sum(np.mean((s[i] - t[i]) ** 2) for i in range(2)) / 2
    assert float(distillation_term(torch.tensor(s), torch.tensor(t))) == pytest.approx(ref_distill, rel=1e-12)
    total = float(lwf_loss(torch.tensor(s), torch.tensor(t), torch.tensor(y), 0.3))
    assert total == pytest.approx(np.mean((s - y) ** 2) + 0.3 * ref_distill, rel=1e-12)
    assert float(lwf_loss(torch.tensor(s), torch.tensor(t), torch.tensor(y), 0.0)) == pytest.approx(np.mean((s - y) ** 2))


def test_lwf_zero_lambda_matches_naive(tasks):
    a = _run("lwf", tasks, epochs=1, hparams={"lwf_lambda": 0.0, "weight_decay": 0.0, "batch_size": 1}, stages=2)
    b = _run("naive", tasks, epochs=1, stages=2)
    for pa, pb in zip(a.model.parameters(), b.model.parameters()):
        assert torch.allclose(pa, pb, atol=1e-6)


# -- replay ------------------------------------------------------------------

def test_reservoir_inclusion_is_uniform():
    n, cap, trials = 1000, 16, 10000
    rng = np.random.default_rng(0)
    counts = np.zeros(n)
    for _ in range(trials):
        counts[reservoir_select(n, cap, rng)] += 1
    expected = trials * cap / n
    sd = np.sqrt(trials * (cap / n) * (1 - cap / n))
    # every item within 5 sd (1000 simultaneous checks), and the bulk within 3 sd
    assert np.abs(counts - expected).max() < 5 * sd
    assert np.mean(np.abs(counts - expected) < 3 * sd) > 0.99


def test_reservoir_buffer_bounds():
    buf = ReplayBuffer(4)
    rng = np.random.default_rng(0)
    for t in range(1, 50):
        reservoir_update(buf, t, t, rng)
        assert len(buf) == min(t, 4)
    empty = ReplayBuffer(0)
    reservoir_update(empty, 1, 1, rng)
    assert len(empty) == 0
    with pytest.raises(ValueError):
        ReplayBuffer(-1)


def _best_two_partition(x):
    best = None
    n = len(x)
    for mask in itertools.product([0, 1], repeat=n - 1):
        labels = np.array((0,) + mask)
        if labels.min() == labels.max():
            continue
        cost = sum(((x[labels == c] - x[labels == c].mean(0)) ** 2).sum() for c in (0, 1))
        if best is None or cost < best[0] - 1e-12:
            best = (cost, labels)
    return best[1]


@pytest.mark.parametrize("seed", range(3))
def test_kmeans_selection_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(0, 0.3, (5, 2)), rng.normal(5, 0.3, (5, 2))])
    labels = _best_two_partition(x)
    expected = []
    for c in (0, 1):
        members = np.where(labels == c)[0]
        centre = x[members].mean(0)
        expected.append(int(members[np.argmin(((x[members] - centre) ** 2).sum(1))]))
    assert kmeans_select(x, 2, seed) == sorted(expected)


def test_kmeans_edge_cases():
    x = np.random.default_rng(0).standard_normal((6, 3))
    assert kmeans_select(x, 6) == list(range(6))
    same = np.ones((5, 3))
    picked = kmeans_select(same, 3)
    assert 1 <= len(picked) <= 3 and len(set(picked)) == len(picked)
    with pytest.raises(ValueError):
        kmeans_select(x, 7)


def test_replay_with_empty_buffer_equals_naive(tasks):
    a = _run("replay_kmeans", tasks, epochs=1, hparams={"weight_decay": 0.0}, stages=1)
    b = _run("naive", tasks, epochs=1, stages=1)
    for pa, pb in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(pa, pb)


def test_replay_memory_capacity(tasks):
    method = _run("replay_reservoir", tasks, epochs=1)
    # budgets 16 then 1 per task; task A only has 6 samples to offer
    assert method.memory.capacity == 16 + 1 + 1 + 1
    assert len(method.memory) == 6 + 1 + 1 + 1
    assert sorted({t for _, _, t in method.memory.items}) == [0, 1, 2, 3]


# -- OGD ---------------------------------------------------------------------

def test_ogd_projection_examples():
    basis = np.array([[1.0, 0.0, 0.0]])
    assert np.allclose(ogd_project(np.array([3.0, 4.0, 5.0]), basis), [0.0, 4.0, 5.0])
    assert np.allclose(ogd_project(np.array([3.0, 4.0, 5.0]), basis, alpha=0.5), [1.5, 4.0, 5.0])
    assert np.allclose(ogd_project(np.array([1.0, 2.0]), np.zeros((0, 2))), [1.0, 2.0])
    g = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    out = ogd_project(g, np.eye(4)[:1])
    assert out.shape == g.shape and float(out[0, 0]) == 0.0
    with pytest.raises(ValueError):
        ogd_project(np.ones(3), np.ones((1, 4)))


@given(st.integers(0, 10_000))
def test_ogd_projection_orthogonal_and_idempotent(seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((12, 4)))
    basis = q.T
    g = rng.standard_normal(12)
    p = ogd_project(g, basis)
    assert np.abs(basis @ p).max() < 1e-10
    assert np.allclose(ogd_project(p, basis), p, atol=1e-10)


def test_compression_keeps_dominant_direction():
    rng = np.random.default_rng(0)
    d = np.zeros(20)
    d[3] = 1.0
    grads = np.stack([d * 10.0 + 1e-6 * rng.standard_normal(20) for _ in range(5)])
    out = basis_update_and_compress(GradientBasis(20), grads)
    assert len(out) == 1 and abs(abs(out.vectors[0] @ d) - 1.0) < 1e-9


def test_compression_respects_cap():
    rng = np.random.default_rng(1)
    out = basis_update_and_compress(GradientBasis(100, cap=32), rng.standard_normal((64, 100)))
    assert len(out) == 32
    assert np.allclose(out.vectors @ out.vectors.T, np.eye(32), atol=1e-10)


def test_in_span_gradients_leave_basis_unchanged():
    rng = np.random.default_rng(2)
    basis = basis_update_and_compress(GradientBasis(10, energy=1.0), rng.standard_normal((3, 10)))
    again = basis_update_and_compress(basis, rng.standard_normal(3) @ basis.vectors)
    assert again is basis


def test_compression_matches_dense_svd_oracle():
    rng = np.random.default_rng(3)
    grads = rng.standard_normal((6, 15)) * np.array([10, 5, 1, 0.5, 0.1, 0.05])[:, None]
    out = basis_update_and_compress(GradientBasis(15, energy=0.95), grads)
    _, s, vt = np.linalg.svd(grads, full_matrices=False)
    energy = np.cumsum(s ** 2) / np.sum(s ** 2)
    k = int(np.argmax(energy >= 0.95) + 1)
    assert len(out) == k <= 32 and energy[k - 1] >= 0.95
    assert np.allclose(out.vectors.T @ out.vectors, vt[:k].T @ vt[:k], atol=1e-8)
    assert np.allclose(out.weights, s[:k], rtol=1e-10)


def test_incremental_compression_keeps_old_span_weighted():
    rng = np.random.default_rng(4)
    first = basis_update_and_compress(GradientBasis(20, energy=1.0), rng.standard_normal((3, 20)) * 5)
    new = rng.standard_normal((2, 20))
    out = basis_update_and_compress(first, new)
    # the stacked matrix is [weighted old rows; new residuals], so its Gram matrix is known
    resid = new - (new @ first.vectors.T) @ first.vectors
    gram = first.vectors.T @ np.diag(first.weights ** 2) @ first.vectors + resid.T @ resid
    assert np.allclose(out.vectors.T @ np.diag(out.weights ** 2) @ out.vectors, gram, atol=1e-9)


# -- A-GEM -------------------------------------------------------------------

def test_agem_examples():
    g, ref = np.array([1.0, -1.0]), np.array([0.0, 1.0])
    assert np.allclose(agem_project(g, ref), [1.0, 0.0])
    assert agem_project(np.array([1.0, 1.0]), ref) is not None
    assert np.allclose(agem_project(np.array([1.0, 1.0]), ref), [1.0, 1.0])
    assert np.allclose(agem_project(np.array([1.0, -0.1]), ref, eps=0.5), [1.0, -0.1])
    with pytest.warns(RuntimeWarning):
        out = agem_project(g, np.zeros(2))
    assert np.array_equal(out, g)


@given(st.integers(0, 10_000))
def test_agem_result_never_opposes_reference(seed):
    rng = np.random.default_rng(seed)
    g, ref = rng.standard_normal(8), rng.standard_normal(8)
    out = agem_project(g, ref)
    assert out @ ref >= -1e-10 * np.linalg.norm(g) * np.linalg.norm(ref)
    if g @ ref < 0:
        assert abs(out @ ref) < 1e-10 * np.linalg.norm(g) * np.linalg.norm(ref)


# -- PiggyBack ---------------------------------------------------------------

def test_masks_of_ones_and_halves():
    model = FNO(TINY).double()
    x = torch.randn(1, 7, 8, 8, dtype=torch.float64)
    masks = new_mask_set(model)
    assert torch.allclose(piggyback_forward(model, masks, x), model(x), atol=1e-12)
    assert set(masked_names(model)) == {n for n, _ in model.named_parameters() if not n.endswith("bias")}
    half = {n: torch.full_like(m, 0.5) for n, m in masks.items()}
    scaled = copy.deepcopy(model)
    with torch.no_grad():
        for n, p in scaled.named_parameters():
            if n in half:
                p.mul_(0.5)
    assert torch.allclose(piggyback_forward(model, half, x), scaled(x), atol=1e-12)
    with pytest.raises(KeyError):
        piggyback_forward(model, None, x)


def test_binarized_masks_use_straight_through():
    w = torch.nn.Linear(2, 1, bias=False)
    m = {"weight": torch.tensor([[0.7, 0.2]], requires_grad=True)}
    from clfno.methods.piggyback import effective_params
    eff = effective_params(w, m, threshold=0.5)["weight"]
    assert torch.equal(eff, w.weight * torch.tensor([[1.0, 0.0]]))
    eff.sum().backward()
    assert torch.allclose(m["weight"].grad, w.weight.detach())


def test_mask_methods_keep_backbone_frozen(tasks):
    for name in ("piggyback", "lora", "sle"):
        method = _run(name, tasks, epochs=1, stages=1)
        before = {n: p.clone() for n, p in method.model.named_parameters()}
        for k in (1, 2):
            method.begin_task(k, tasks[k])
            fit(method, k, tasks[k], method.settings(2), torch.Generator().manual_seed(k))
            method.end_task(k, tasks[k])
        assert all(torch.equal(before[n], p) for n, p in method.model.named_parameters()), name


# -- LoRA --------------------------------------------------------------------

def test_lora_zero_update_is_identity():
    model = FNO(TINY).double()
    ads = attach_adapters(model.double(), 4, None, torch.Generator().manual_seed(0))
    for ad in ads.values():
        ad.A, ad.B = ad.A.double(), ad.B.double()
    x = torch.randn(1, 7, 8, 8, dtype=torch.float64)
    assert torch.allclose(lora_forward(model, ads, x), model(x), atol=1e-12)
    assert all(n.endswith("weight") and "spectral" not in n for n in ads)


def test_lora_factorization_and_scale():
    rng = np.random.default_rng(0)
    target = rng.standard_normal((6, 3)) @ rng.standard_normal((3, 5))  # rank 3
    ad = LoraAdapter(6, 5, 3, alpha=3)
    u, s, vt = np.linalg.svd(target)
    with torch.no_grad():
        ad.A.copy_(torch.tensor(u[:, :3] * s[:3], dtype=torch.float32))
        ad.B.copy_(torch.tensor(vt[:3], dtype=torch.float32))
    assert np.allclose(ad.delta().detach().numpy(), target, atol=1e-5)
    doubled = LoraAdapter(6, 5, 3, alpha=6)
    with torch.no_grad():
        doubled.A.copy_(ad.A)
        doubled.B.copy_(ad.B)
    assert torch.allclose(doubled.delta(), 2 * ad.delta())
    with pytest.raises(ValueError):
        LoraAdapter(2, 5, 3, alpha=1)


def test_lora_rank_clipped_per_matrix():
    ads = attach_adapters(FNO(FnoConfig(hidden_channels=4, num_layers=1, modes=3)), 8, None)
    assert ads["proj.fc2.weight"].rank == 1 and ads["lift.fc1.weight"].rank == 7


# -- SLE ---------------------------------------------------------------------

def test_sle_zero_gate_is_identity():
    model = FNO(TINY)
    branch = SleBranch(4, 3)
    x = torch.randn(2, 7, 8, 8)
    assert torch.equal(sle_forward(model, branch, x), model(x))
    with pytest.raises(ValueError):
        sle_forward(model, SleBranch(5, 3), x)


def test_sle_branch_size():
    for cfg in (TINY, FnoConfig(hidden_channels=16, modes=6), FnoConfig()):
        assert sum(p.numel() for p in SleBranch(cfg.hidden_channels, cfg.modes).parameters()) == branch_parameter_count(cfg)


def test_sle_routes_and_counts(tasks):
    method = _run("sle", tasks, epochs=1)
    assert sorted(method.branches) == [1, 2, 3]
    assert method.added_parameters() == {k: branch_parameter_count(TINY) for k in (1, 2, 3)}


# -- shared behaviour ----------------------------------------------------------

@pytest.mark.parametrize("name", sorted(METHODS))
def test_zero_epochs_leave_model_unchanged(name, tasks):
    method = make_method(name, FNO(TINY, seed=1), {}, seed=0)
    before = [p.clone() for p in method.model.parameters()]
    method.begin_task(0, tasks[0])
    fit(method, 0, tasks[0], StageSettings(0, 1e-2, 0.0, 2), torch.Generator().manual_seed(0))
    assert all(torch.equal(a, b) for a, b in zip(before, method.model.parameters()))


@pytest.mark.parametrize("name", sorted(METHODS))
def test_same_seed_same_result(name, tasks):
    a = _run(name, tasks, epochs=1, stages=2)
    b = _run(name, tasks, epochs=1, stages=2)
    for (_, pa), (_, pb) in zip(a.store().items(), b.store().items()):
        assert torch.equal(pa, pb)


def test_unknown_hyperparameter_rejected():
    with pytest.raises(ValueError):
        make_method("ewc", FNO(TINY), {"lamda": 1.0})
    with pytest.raises(ValueError):
        make_method("nope", FNO(TINY), {})
