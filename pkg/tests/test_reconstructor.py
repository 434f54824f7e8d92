import numpy as np
import pytest
import torch

from sparsetwin.encoder import FourierFeatures
from sparsetwin.opcount import count_ops
from sparsetwin.reconstructor import (
    Reconstructor,
    ReconstructorConfig,
    select_neighbors,
    warped_distance,
)
from sparsetwin.training import grad_check


def oracle_select(query, sensors, phi, k, gamma=1.0, eps=1e-6):
    """Exhaustive full sort with explicit lexicographic tie-break."""
    d = np.linalg.norm(query - sensors, axis=-1) / (phi**gamma + eps)
    order = np.lexsort((np.arange(len(d)), d))
    return order[: min(k, len(d))]


def _recon(latent_dim=16, n_channels=2, **kw) -> Reconstructor:
    cfg = ReconstructorConfig(fusion_hidden=kw.pop("fusion_hidden", 32), **kw)
    fourier = FourierFeatures(2, 8, latent_dim)
    return Reconstructor(cfg, latent_dim, n_channels, fourier)


class TestWarpedDistance:
    def test_unit_importance_is_euclidean(self):
        d = warped_distance(np.array([2.0]), np.array([1.0]), gamma=3.0, eps=1e-6)
        assert d[0] == pytest.approx(2.0 / (1.0 + 1e-6))

    def test_high_importance_ranks_closer(self):
        # sensor A: distance 1.0, phi 0.2 -> ~5.0; sensor B: distance 2.0, phi 0.9 -> ~2.22
        d_a = warped_distance(np.array([1.0]), np.array([0.2]), gamma=1.0, eps=1e-12)
        d_b = warped_distance(np.array([2.0]), np.array([0.9]), gamma=1.0, eps=1e-12)
        assert d_a[0] == pytest.approx(5.0, rel=1e-9)
        assert d_b[0] == pytest.approx(2.0 / 0.9, rel=1e-9)
        assert d_b[0] < d_a[0]

    def test_coincident_point(self):
        assert warped_distance(np.array([0.0]), np.array([0.3]))[0] == 0.0

    def test_monotone_decreasing_in_phi(self):
        phis = np.linspace(0.05, 0.95, 10)
        d = warped_distance(np.full(10, 1.5), phis, gamma=1.0)
        assert np.all(np.diff(d) < 0)


class TestSelection:
    def test_uniform_phi_reduces_to_knn(self):
        rng = np.random.default_rng(0)
        sensors = rng.uniform(-1, 1, size=(50, 2))
        queries = rng.uniform(-1, 1, size=(20, 2))
        phi = np.full(50, 0.7)
        idx, _ = select_neighbors(queries, sensors, phi, 5)
        for q in range(20):
            euclid = np.linalg.norm(queries[q] - sensors, axis=-1)
            expected = np.lexsort((np.arange(50), euclid))[:5]
            assert np.array_equal(idx[q], expected)

    def test_matches_oracle_random_instances(self):
        rng = np.random.default_rng(1)
        for trial in range(200):
            n = rng.integers(1, 60)
            k = int(rng.integers(1, 17))
            gamma = rng.choice([0.5, 1.0, 2.0])
            sensors = rng.uniform(-1, 1, size=(n, 2))
            phi = rng.uniform(0.01, 0.99, size=n)
            query = rng.uniform(-1, 1, size=(1, 2))
            idx, _ = select_neighbors(query, sensors, phi, k, gamma=gamma)
            assert np.array_equal(idx[0], oracle_select(query[0], sensors, phi, k, gamma))

    def test_importance_displaces_near_sensor(self):
        sensors = np.array([[0.1, 0.0], [0.5, 0.0]])
        phi = np.array([0.05, 0.95])
        query = np.array([[0.0, 0.0]])
        idx, _ = select_neighbors(query, sensors, phi, 1, gamma=1.0)
        assert idx[0, 0] == 1  # farther but far more important

    def test_tie_break_by_index(self):
        sensors = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
        phi = np.full(3, 0.5)
        idx, _ = select_neighbors(np.array([[0.0, 0.0]]), sensors, phi, 2)
        assert np.array_equal(idx[0], [0, 1])

    def test_fewer_sensors_than_k(self):
        sensors = np.random.default_rng(2).uniform(size=(3, 2))
        idx, d = select_neighbors(np.zeros((1, 2)), sensors, np.full(3, 0.5), 8)
        assert idx.shape == (1, 3)

    def test_empty_sensor_set(self):
        with pytest.raises(ValueError):
            select_neighbors(np.zeros((1, 2)), np.zeros((0, 2)), np.zeros(0), 4)


class TestAggregate:
    def test_single_neighbor(self):
        recon = _recon(top_k=1)
        w_dist = torch.tensor([[0.7]])
        phi = torch.tensor([[0.4]])
        tokens = torch.randn(1, 1, 16)
        feats, weights = recon.aggregate(w_dist, phi, tokens)
        assert torch.allclose(weights, torch.ones(1, 1))
        assert torch.allclose(feats, 0.4 * recon.proj(tokens[:, 0]), atol=1e-6)

    def test_equal_distances_equal_weights(self):
        recon = _recon()
        w_dist = torch.full((3, 4), 1.3)
        phi = torch.full((3, 4), 0.5)
        tokens = torch.randn(3, 4, 16)
        _, weights = recon.aggregate(w_dist, phi, tokens)
        assert torch.allclose(weights, torch.full((3, 4), 0.25), atol=1e-7)

    def test_weights_sum_to_one_and_shift_invariant(self):
        recon = _recon()
        rng = np.random.default_rng(3)
        w_dist = torch.tensor(rng.uniform(0, 2, size=(5, 6)), dtype=torch.float64)
        phi = torch.tensor(rng.uniform(0.1, 0.9, size=(5, 6)), dtype=torch.float64)
        tokens = torch.randn(5, 6, 16, dtype=torch.float64)
        recon = recon.double()
        _, weights = recon.aggregate(w_dist, phi, tokens)
        assert torch.allclose(weights.sum(dim=-1), torch.ones(5, dtype=torch.float64))
        shift = recon.cfg.bandwidth * 0.37  # constant added to all logits
        _, weights2 = recon.aggregate(w_dist + shift, phi, tokens)
        assert torch.allclose(weights, weights2, atol=1e-12)

    def test_weight_gradient_matches_finite_differences(self):
        recon = _recon().double()
        rng = np.random.default_rng(4)
        base = rng.uniform(0.2, 1.5, size=(2, 3))
        phi = torch.tensor(rng.uniform(0.3, 0.9, size=(2, 3)), dtype=torch.float64)
        tokens = torch.zeros(2, 3, 16, dtype=torch.float64)

        def weight_sum(d_np):
            d = torch.tensor(d_np, dtype=torch.float64, requires_grad=True)
            _, weights = recon.aggregate(d, phi, tokens)
            out = (weights * torch.arange(6, dtype=torch.float64).reshape(2, 3)).sum()
            out.backward()
            return float(out.detach()), d.grad.numpy()

        value, grad = weight_sum(base)
        eps = 1e-6
        for i in range(2):
            for j in range(3):
                dp = base.copy()
                dp[i, j] += eps
                dm = base.copy()
                dm[i, j] -= eps
                fp, _ = weight_sum(dp)
                fm, _ = weight_sum(dm)
                fd = (fp - fm) / (2 * eps)
                assert abs(fd - grad[i, j]) < 1e-6 * max(1.0, abs(fd))

    def test_monotone_influence_in_phi(self):
        recon = _recon().double()
        w_dist = torch.tensor([[0.5, 0.8, 1.1]], dtype=torch.float64)
        tokens = torch.randn(1, 3, 16, dtype=torch.float64)
        phis = np.linspace(0.1, 0.9, 9)
        contributions = []
        for p in phis:
            phi = torch.tensor([[p, 0.5, 0.5]], dtype=torch.float64)
            _, weights = recon.aggregate(w_dist, phi, tokens)
            contributions.append(float(weights[0, 0] * phi[0, 0]))
        assert np.all(np.diff(contributions) >= 0)


class TestDecodeQuery:
    def test_zero_fusion_weights_emit_head_biases(self):
        recon = _recon()
        with torch.no_grad():
            for layer in (recon.fusion_in, recon.fusion_hidden, recon.mean_head, recon.logvar_head):
                layer.weight.zero_()
            recon.fusion_in.bias.zero_()
            recon.fusion_hidden.bias.zero_()
            recon.mean_head.bias.copy_(torch.tensor([0.3, -0.7]))
            recon.logvar_head.bias.copy_(torch.tensor([0.1, 0.2]))
        feats = torch.randn(5, 16)
        mean, log_var = recon.decode_query(feats, torch.randn(5, 2), torch.randn(16))
        assert torch.allclose(mean, torch.tensor([0.3, -0.7]).expand(5, 2))
        assert torch.allclose(log_var, torch.tensor([0.1, 0.2]).expand(5, 2))

    def test_pure_function(self):
        recon = _recon()
        feats = torch.randn(3, 16)
        q = torch.randn(3, 2)
        z = torch.randn(16)
        m1, lv1 = recon.decode_query(feats, q, z)
        m2, lv2 = recon.decode_query(feats, q, z)
        assert torch.equal(m1, m2) and torch.equal(lv1, lv2)

    def test_logvar_clamp(self):
        recon = _recon()
        with torch.no_grad():
            recon.logvar_head.weight.zero_()
            recon.logvar_head.bias.fill_(50.0)
        _, log_var = recon.decode_query(torch.randn(2, 16), torch.randn(2, 2), torch.randn(16))
        assert torch.all(log_var == 10.0)


class TestReconstructField:
    def _setup(self, n_sensors=30, seed=0):
        torch.manual_seed(seed)
        recon = _recon()
        rng = np.random.default_rng(seed)
        sensor_x = torch.tensor(rng.uniform(-1, 1, size=(n_sensors, 2)), dtype=torch.float32)
        phi = torch.tensor(rng.uniform(0.2, 0.9, size=n_sensors), dtype=torch.float32)
        z_local = torch.randn(n_sensors, 16)
        z_global = torch.randn(16)
        return recon, sensor_x, phi, z_local, z_global

    def test_batch_invariance(self):
        recon, sensor_x, phi, z_local, z_global = self._setup()
        rng = np.random.default_rng(1)
        queries = torch.tensor(rng.uniform(-1, 1, size=(200, 2)), dtype=torch.float32)
        full = recon(z_global, z_local, sensor_x, phi, queries)
        single = recon(z_global, z_local, sensor_x, phi, queries[37:38])
        # selection and weights are bit-identical; the fused values are equal
        # up to BLAS reassociation across batch shapes
        assert torch.equal(full.neighbors[37], single.neighbors[0])
        assert torch.equal(full.weights[37], single.weights[0])
        assert torch.allclose(full.mean[37], single.mean[0], atol=1e-6)
        assert torch.allclose(full.log_var[37], single.log_var[0], atol=1e-6)

    def test_chunked_equals_unchunked(self):
        recon, sensor_x, phi, z_local, z_global = self._setup()
        queries = torch.rand(100, 2) * 2 - 1
        big = recon(z_global, z_local, sensor_x, phi, queries)
        recon.cfg.query_chunk = 17
        small = recon(z_global, z_local, sensor_x, phi, queries)
        assert torch.equal(big.neighbors, small.neighbors)
        assert torch.allclose(big.mean, small.mean, atol=1e-6)

    def test_neighbor_provenance_valid(self):
        recon, sensor_x, phi, z_local, z_global = self._setup()
        queries = torch.rand(50, 2) * 2 - 1
        out = recon(z_global, z_local, sensor_x, phi, queries)
        assert out.neighbors.min() >= 0 and out.neighbors.max() < 30
        for q in range(50):
            assert len(torch.unique(out.neighbors[q])) == recon.cfg.top_k
        sums = out.weights.sum(dim=-1)
        assert torch.allclose(sums, torch.ones(50), atol=1e-5)

    def test_global_only_ignores_local(self):
        recon, sensor_x, phi, z_local, z_global = self._setup()
        queries = torch.rand(20, 2) * 2 - 1
        a = recon(z_global, z_local, sensor_x, phi, queries, use_local=False)
        b = recon(z_global, torch.randn_like(z_local), sensor_x, phi, queries, use_local=False)
        assert torch.equal(a.mean, b.mean)
        assert a.neighbors.shape == (20, 0)

    def test_end_to_end_gradient_fixed_selection(self):
        torch.manual_seed(5)
        recon = _recon(latent_dim=8, n_channels=1, fusion_hidden=12, top_k=3).double()
        recon.fourier = FourierFeatures(2, 4, 8).double()
        rng = np.random.default_rng(6)
        sensor_x = torch.tensor(rng.uniform(-1, 1, size=(5, 2)), dtype=torch.float64)
        z_local = torch.randn(5, 8, dtype=torch.float64)
        z_global = torch.randn(8, dtype=torch.float64)
        queries = torch.tensor(rng.uniform(-1, 1, size=(3, 2)), dtype=torch.float64)
        target = torch.randn(3, 1, dtype=torch.float64)
        idx, _ = select_neighbors(
            queries.numpy(), sensor_x.numpy(), np.full(5, 0.5), 3
        )
        idx_t = torch.from_numpy(idx)
        phi = torch.full((5,), 0.5, dtype=torch.float64)

        def loss_fn():
            x_sel = sensor_x[idx_t]
            dist = torch.linalg.vector_norm(queries.unsqueeze(1) - x_sel, dim=-1)
            w_dist = warped_distance(dist, phi[idx_t], 1.0, 1e-6)
            feats, _ = recon.aggregate(w_dist, phi[idx_t], z_local[idx_t])
            mean, log_var = recon.decode_query(feats, queries, z_global)
            return ((mean - target) ** 2).mean() + 0.1 * log_var.square().mean()

        assert grad_check(recon, loss_fn, max_params_per_tensor=60) <= 1e-4

    def test_counted_softmax_work(self):
        recon, sensor_x, phi, z_local, z_global = self._setup()
        queries = torch.rand(64, 2) * 2 - 1
        with count_ops() as ops:
            recon(z_global, z_local, sensor_x, phi, queries)
        assert ops.score_elements == 64 * recon.cfg.top_k
