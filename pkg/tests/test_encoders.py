import numpy as np
import pytest

from vlreward.encoders import (
    EncoderConfig,
    ImageEncoder,
    LoraAdapter,
    SimilarityFn,
    TextEncoder,
    build_encoders,
    encode_image,
    encode_text,
    load_checkpoint,
    merge_lora,
    save_checkpoint,
    similarity,
)
from vlreward.exceptions import ConfigError, ShapeError, UnknownGoalError, VersionError
from vlreward.numcore import Tensor, grad_check

FAMILIES = {100: "press", 101: "drawer", 102: "drawer", 103: "door"}


@pytest.fixture
def encoders():
    cfg = EncoderConfig(obs_dim=6, hidden=(8,), embed_dim=4, table_dim=5, lora_rank=2, seed=3)
    return build_encoders(cfg, FAMILIES)


def test_cosine_similarity_of_parallel_vectors():
    s = SimilarityFn("cosine")
    a = Tensor([[1.0, 2.0], [3.0, 0.0]])
    np.testing.assert_allclose(s(a, a * 4.0).data, [1.0, 1.0])


def test_neg_l2_similarity():
    s = SimilarityFn("neg_l2")
    out = s(Tensor([[0.0, 0.0]]), Tensor([[3.0, 4.0]]))
    np.testing.assert_allclose(out.data, [-5.0])


def test_similarity_matrix_matches_rowwise():
    rs = np.random.RandomState(0)
    a, b = Tensor(rs.normal(size=(3, 4))), Tensor(rs.normal(size=(5, 4)))
    for kind in SimilarityFn.KINDS:
        s = SimilarityFn(kind)
        m = s.matrix(a, b).data
        for i in range(3):
            for j in range(5):
                assert m[i, j] == pytest.approx(s(a[i], b[j]).item())


def test_similarity_shape_mismatch():
    with pytest.raises(ShapeError):
        SimilarityFn()(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))))


def test_unknown_similarity():
    with pytest.raises(ConfigError):
        SimilarityFn("dot")


def test_lora_starts_as_identity_update():
    rs = np.random.RandomState(0)
    image = ImageEncoder(6, (8,), 4, rs)
    x = rs.normal(size=(5, 6))
    before = image(x).data
    image.add_lora(rank=2, alpha=4.0, random_state=rs)
    np.testing.assert_equal(image(x).data, before)


def test_lora_scaling():
    adapter = LoraAdapter(3, 2, rank=4, alpha=8.0)
    assert adapter.scaling == 2.0


def test_merge_lora_matches_adapted_forward(encoders):
    image, _ = encoders
    rs = np.random.RandomState(1)
    for layer in image.layers:
        layer.adapter.B.data = rs.normal(size=layer.adapter.B.shape)
    x = rs.normal(size=(4, 6))
    merged = merge_lora(image)
    assert not merged.has_adapters
    assert image.has_adapters
    np.testing.assert_allclose(merged(x).data, image(x).data, atol=1e-12)


def test_merge_lora_without_adapters_warns(caplog):
    image = ImageEncoder(3, (4,), 2, np.random.RandomState(0))
    assert merge_lora(image) is image
    assert "without adapters" in caplog.text


def test_image_encoder_rejects_wrong_width(encoders):
    image, _ = encoders
    with pytest.raises(ShapeError):
        image(np.ones((2, 7)))


def test_text_encoder_scalar_and_batch(encoders):
    _, text = encoders
    assert text(101).shape == (4,)
    assert text(np.array([100, 103, 103])).shape == (3, 4)
    np.testing.assert_equal(text(np.array([101])).data[0], text(101).data)


def squared_norm(z):
    return (z * z).sum()


def through(owner, attr, forward):
    """Scalar function of the tensor stored at `owner.attr`."""

    def f(x):
        saved = getattr(owner, attr)
        setattr(owner, attr, x)
        try:
            return forward()
        finally:
            setattr(owner, attr, saved)

    return f


def test_image_encoder_gradient_wrt_observations(encoders):
    image, _ = encoders
    obs = np.random.RandomState(0).normal(size=(5, 6))
    assert grad_check(lambda x: squared_norm(encode_image(image, x)), obs) < 1e-4


@pytest.mark.parametrize("attr", ["weight", "bias"])
def test_image_encoder_gradient_wrt_layers(encoders, attr):
    image, _ = encoders
    obs = Tensor(np.random.RandomState(1).normal(size=(5, 6)))
    for layer in image.layers:
        f = through(layer, attr, lambda: squared_norm(encode_image(image, obs)))
        assert grad_check(f, getattr(layer, attr).data) < 1e-4


def test_image_encoder_gradient_wrt_adapters(encoders):
    image, _ = encoders
    obs = Tensor(np.random.RandomState(2).normal(size=(5, 6)))
    rs = np.random.RandomState(3)
    for layer in image.layers:
        layer.adapter.B = Tensor(rs.normal(size=layer.adapter.B.shape), requires_grad=True)
    for layer in image.layers:
        for attr in ("A", "B"):
            f = through(layer.adapter, attr, lambda: squared_norm(encode_image(image, obs)))
            assert grad_check(f, getattr(layer.adapter, attr).data) < 1e-4


def test_text_encoder_gradient_wrt_projection(encoders):
    _, text = encoders
    goals = np.array([100, 101, 103, 101])
    for attr in ("weight", "bias"):
        f = through(text.projection, attr, lambda: squared_norm(encode_text(text, goals)))
        assert grad_check(f, getattr(text.projection, attr).data) < 1e-4


def test_text_encoder_gradient_wrt_table(encoders):
    _, text = encoders
    f = through(text, "table", lambda: squared_norm(encode_text(text, np.array([100, 102, 102]))))
    assert grad_check(f, text.table.data) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_distinct_goals_embed_apart(seed):
    _, text = build_encoders(EncoderConfig(seed=seed), FAMILIES)
    embedded = encode_text(text, np.array(sorted(FAMILIES))).data
    for i in range(len(embedded)):
        for j in range(i + 1, len(embedded)):
            assert np.linalg.norm(embedded[i] - embedded[j]) > 1e-3


def test_unknown_goal(encoders):
    _, text = encoders
    with pytest.raises(UnknownGoalError):
        text(999)


def test_family_rows_cluster():
    text = TextEncoder.from_families(FAMILIES, table_dim=64, jitter=0.1, random_state=np.random.RandomState(0))
    rows = {g: text.table.data[n] for n, g in enumerate(text.goal_ids)}
    same = np.linalg.norm(rows[101] - rows[102])
    other = np.linalg.norm(rows[101] - rows[100])
    assert same < other


def test_freeze_base_keeps_only_adapters_trainable():
    cfg = EncoderConfig(obs_dim=6, hidden=(8,), embed_dim=4, table_dim=5, lora_rank=2, freeze_base=True)
    image, text = build_encoders(cfg, FAMILIES)
    names = set(image.parameters()) | set(text.parameters())
    assert names and all("lora" in name for name in names)


def test_goal_table_frozen_by_default(encoders):
    _, text = encoders
    assert "table" not in text.parameters()


def test_build_is_deterministic():
    cfg = EncoderConfig(obs_dim=6, hidden=(8,), embed_dim=4, table_dim=5, seed=11)
    first, second = build_encoders(cfg, FAMILIES), build_encoders(cfg, FAMILIES)
    for a, b in zip(first, second):
        for key, value in a.state_dict().items():
            np.testing.assert_equal(value, b.state_dict()[key])


def test_freeze_without_lora_is_rejected():
    with pytest.raises(ConfigError):
        EncoderConfig(use_lora=False, freeze_base=True)


def test_checkpoint_round_trip(tmp_path, encoders):
    image, text = encoders
    text.layers[0].adapter.B.data = np.full(text.layers[0].adapter.B.shape, 0.5)
    path = save_checkpoint(tmp_path / "model.npz", image, text, SimilarityFn("neg_l2"), {"objective": "triplet"})
    image2, text2, sim, header = load_checkpoint(path)
    assert sim.kind == "neg_l2"
    assert header["metadata"]["objective"] == "triplet"
    assert set(image2.parameters()) == set(image.parameters())
    x = np.random.RandomState(2).normal(size=(3, 6))
    np.testing.assert_equal(image2(x).data, image(x).data)
    np.testing.assert_equal(text2(np.array([100, 102])).data, text(np.array([100, 102])).data)


def test_checkpoint_is_byte_identical(tmp_path, encoders):
    image, text = encoders
    a = save_checkpoint(tmp_path / "a.npz", image, text, SimilarityFn())
    b = save_checkpoint(tmp_path / "b.npz", image, text, SimilarityFn())
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_version_mismatch(tmp_path, encoders):
    from vlreward.archive_io import write_container

    path = write_container(tmp_path / "old.npz", {"format": "vlreward.checkpoint", "version": 99}, {})
    with pytest.raises(VersionError):
        load_checkpoint(path)


def test_single_observation_round_trip(encoders):
    image, text = encoders
    z = encode_image(image, np.linspace(-1, 1, 6))
    v = encode_text(text, 103)
    assert z.shape == v.shape == (4,)
    assert -1.0 <= similarity(SimilarityFn(), z, v).item() <= 1.0
