import math

import numpy as np
import pytest
import torch

from canopy_fewshot.checkpoint import WEIGHTS_FILE, load_checkpoint, save_checkpoint
from canopy_fewshot.dataset import DatasetManifest, Tile
from canopy_fewshot.errors import ParameterError, ShapeError, ValidationError
from canopy_fewshot.pairs import PairSample, build_pair_dataset, sample_balanced
from canopy_fewshot.siamese import (
    SiameseNet,
    TowerSpec,
    TrainingConfig,
    build_tower,
    count_trainable,
    embed,
    pair_loss,
    pair_loss_grad,
    refine,
    similarity,
    tile_tensor,
    train_base,
)


def brightness_manifest(n=4, seed=0):
    """Two trivially separable classes: dark and bright noisy tiles."""
    rng = np.random.default_rng(seed)
    tiles = []
    for label, level in (("dark", 40), ("bright", 200)):
        for i in range(n):
            px = np.clip(level + rng.normal(0, 20, size=(128, 128, 3)), 0, 255).astype(np.uint8)
            tiles.append(Tile(f"{label}{i}", px, label, 6.0, source="synthetic"))
    return DatasetManifest(tiles, {t.tile_id: "base_train" for t in tiles})


@pytest.fixture(scope="module")
def trained():
    m = brightness_manifest()
    pairs = build_pair_dataset(m, None, seed=0)
    cfg = TrainingConfig(epochs=4, batch_size=8, learning_rate=1e-3, seed=7)
    return m, pairs, cfg, train_base(pairs, m, TowerSpec(embedding_dim=16), cfg)


# ---------------------------------------------------------------------------
# similarity head and loss


def test_similarity_identity_and_half():
    a = np.random.default_rng(0).normal(size=8)
    assert similarity(a, a) == 1.0
    u = np.zeros(8)
    u[3] = math.log(2)
    assert similarity(a, a + u) == pytest.approx(0.5, abs=1e-12)


def test_similarity_symmetric_and_bounded():
    rng = np.random.default_rng(1)
    for _ in range(200):
        a, b = rng.normal(size=(2, 16)) * rng.uniform(0.01, 5)
        s = similarity(a, b)
        assert s == similarity(b, a)
        assert 0.0 <= s <= 1.0


def test_similarity_length_mismatch():
    with pytest.raises(ShapeError):
        similarity(np.zeros(3), np.zeros(4))


def test_pair_loss_values():
    assert pair_loss(0.5, 1) == pytest.approx(math.log(2), abs=1e-12)
    assert pair_loss(0.5, 0) == pytest.approx(math.log(2), abs=1e-12)
    assert pair_loss(1 - 1e-12, 1) < 1e-6
    assert math.isfinite(pair_loss(0.0, 1)) and math.isfinite(pair_loss(1.0, 0))


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(3)
    h = 1e-6
    for _ in range(50):
        a, b = rng.normal(size=(2, 8))
        t = int(rng.integers(2))
        _, g = pair_loss_grad(a, b, t)
        fd = np.array(
            [
                (pair_loss(similarity(a + h * e, b), t) - pair_loss(similarity(a - h * e, b), t)) / (2 * h)
                for e in np.eye(8)
            ]
        )
        assert np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12) < 1e-4


def test_torch_training_loss_matches_reference():
    # the float64 torch path used for training must agree with the reference loss and gradient
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(2, 8))
    ta = torch.tensor(a, requires_grad=True)
    d = torch.sqrt(((ta - torch.tensor(b)) ** 2).sum())
    s = torch.exp(-d).clamp(1e-7, 1 - 1e-7)
    loss = -torch.log(1 - s)
    loss.backward()
    ref_loss, ref_grad = pair_loss_grad(a, b, 0)
    assert loss.item() == pytest.approx(ref_loss, rel=1e-12)
    np.testing.assert_allclose(ta.grad.numpy(), ref_grad, rtol=1e-10)


# ---------------------------------------------------------------------------
# towers


def test_shallow_tower_param_count_near_reported_figure():
    n = count_trainable(build_tower(TowerSpec()))
    assert 350_000 < n < 450_000


def test_lightweight_tower_without_download():
    spec = TowerSpec(kind="pretrained_lightweight", weights=None)
    net = SiameseNet(build_tower(spec)).eval()
    with torch.no_grad():
        e = net.embed(torch.rand(1, 3, 128, 128))
    assert e.shape == (1, 128) and torch.isfinite(e).all()
    assert count_trainable(net) > 2_000_000


def test_unknown_tower_kind():
    with pytest.raises(ParameterError):
        TowerSpec(kind="resnet")


@pytest.mark.parametrize("kw", [{"epochs": 0}, {"batch_size": 0}, {"learning_rate": 0.0}, {"loss": "hinge"}])
def test_training_config_validation(kw):
    with pytest.raises(ParameterError):
        TrainingConfig(**kw)


def test_refinement_defaults():
    cfg = TrainingConfig.refinement()
    assert cfg.epochs == 50 and cfg.learning_rate == 1e-4 and cfg.batch_size == 32 and cfg.seed == 42


# ---------------------------------------------------------------------------
# training / embedding


def test_loss_decreases(trained):
    *_, ck = trained
    losses = ck.lineage[0]["losses"]
    assert len(losses) == 4
    assert losses[-1] < losses[0]


def test_single_full_batch_epoch_is_one_pass():
    m = brightness_manifest(3)
    pairs = build_pair_dataset(m, None, seed=0)
    ck = train_base(pairs, m, TowerSpec(embedding_dim=8), TrainingConfig(epochs=1, batch_size=len(pairs), seed=1))
    entry = ck.lineage[0]
    assert entry["optimizer_steps"] == 1
    assert entry["pairs_seen"] == len(pairs)


def test_missing_tile_rejected_before_training():
    m = brightness_manifest(2)
    pairs = sample_balanced([PairSample("dark0", "dark1", 1)], [PairSample("dark0", "ghost", 0)], 1, 0)
    with pytest.raises(ValidationError, match="ghost"):
        train_base(pairs, m, TowerSpec(), TrainingConfig(epochs=1))


def test_embed_deterministic_and_pure(trained):
    m, *_, ck = trained
    t = m.tiles[0]
    copy = Tile("copy", t.pixels.copy(), t.class_label, t.gsd_cm)
    e1, e2, e3 = embed(t, ck), embed(t, ck), embed(copy, ck)
    assert e1.shape == (16,) and np.isfinite(e1).all()
    np.testing.assert_array_equal(e1, e2)
    np.testing.assert_array_equal(e1, e3)
    assert similarity(e1, e3) == 1.0


def test_embed_rejects_unnormalized(trained):
    *_, ck = trained
    with pytest.raises(ShapeError):
        embed(Tile("x", np.zeros((64, 64, 3), np.uint8), "a", 6.0), ck)


def test_weight_tying(trained):
    m, *_, ck = trained
    net = ck.model
    assert set(dict(net.named_children())) == {"tower"}
    x = tile_tensor([m.tiles[0]])
    with torch.no_grad():
        both = net.tower(torch.cat([x, x]))
    assert torch.equal(both[0], both[1])


def test_training_is_deterministic(trained):
    m, pairs, cfg, ck = trained
    again = train_base(pairs, m, TowerSpec(embedding_dim=16), cfg)
    a, b = m.tiles[0], m.tiles[-1]
    s1 = similarity(embed(a, ck), embed(b, ck))
    s2 = similarity(embed(a, again), embed(b, again))
    assert abs(s1 - s2) <= 1e-6


def test_learned_separation(trained):
    m, *_, ck = trained
    e = {t.tile_id: embed(t, ck) for t in m.tiles}
    assert similarity(e["dark0"], e["dark1"]) > similarity(e["dark0"], e["bright0"])


def test_refine_extends_lineage_and_leaves_base(trained):
    m, pairs, _, ck = trained
    before = {k: v.clone() for k, v in ck.weights.items()}
    out = refine(ck, pairs, m, TrainingConfig(epochs=1, learning_rate=1e-3, seed=3))
    assert len(out.lineage) == len(ck.lineage) + 1
    assert out.lineage[:-1] == ck.lineage and out.lineage[-1]["stage"] == "refine"
    assert all(torch.equal(before[k], ck.weights[k]) for k in before)
    assert any(not torch.equal(out.weights[k], ck.weights[k]) for k in before)


def test_refine_empty_support_rejected(trained):
    m, pairs, cfg, ck = trained
    from canopy_fewshot.pairs import PairDataset

    with pytest.raises(ValidationError):
        refine(ck, PairDataset(pairs=()), m, cfg)


def test_checkpoint_roundtrip_byte_stable(trained, tmp_path):
    m, *_, ck = trained
    save_checkpoint(ck, tmp_path / "a")
    loaded = load_checkpoint(tmp_path / "a")
    save_checkpoint(loaded, tmp_path / "b")
    assert (tmp_path / "a" / WEIGHTS_FILE).read_bytes() == (tmp_path / "b" / WEIGHTS_FILE).read_bytes()
    assert loaded.tower_spec == ck.tower_spec and loaded.lineage == tuple(ck.lineage)
    np.testing.assert_array_equal(embed(m.tiles[0], loaded), embed(m.tiles[0], ck))
    import json

    meta = json.loads((tmp_path / "a" / "model.json").read_text())
    assert meta["tower"] == "shallow_cnn" and meta["embedding_dim"] == 16 and meta["seed"] == 7


def test_missing_checkpoint(tmp_path):
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path)
