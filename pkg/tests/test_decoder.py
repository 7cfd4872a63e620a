import json
import os

import numpy as np
import pytest

from panoos import numerics as nx
from panoos.decoder import (
    LARGE,
    AttentionMask,
    FeatureBundle,
    ModelConfig,
    POSModel,
    QueryState,
    aggregate_logits,
    build_attention_mask,
    forward_scene,
    masked_attention,
    project_prompts,
    rba_score,
    synth_text_encode,
)
from panoos.errors import ContractError, DimensionError
from panoos.numerics import Tensor
from panoos.synthdata import SceneConfig, generate_scene, write_raster

from oracles import ref_rba

GOLDEN = json.load(open(os.path.join(os.path.dirname(__file__), "golden", "seed7.json")))
SMALL_SCENE = SceneConfig(height=32, width=64)
SMALL_MODEL = ModelConfig(num_queries=8, query_dim=16, mask_dim=16, text_dim=32, ffn_dim=32, seed=7)


@pytest.fixture(scope="module")
def model():
    return POSModel(SMALL_MODEL)


@pytest.fixture(scope="module")
def bundle():
    return FeatureBundle.from_scene(generate_scene(SMALL_SCENE, 7))


def test_output_shapes(model, bundle):
    with nx.no_grad():
        out = forward_scene(model, bundle)
    K, N = SMALL_MODEL.num_classes, SMALL_MODEL.num_queries
    assert out.M.shape == (N, 32, 64)
    assert out.P.shape == (N, K)
    assert out.S.shape == (K, 32, 64)
    assert out.A.shape == (32, 64)
    assert out.pixel_embeddings.shape == (SMALL_MODEL.mask_dim, 8, 16)
    np.testing.assert_allclose(out.P.data.sum(axis=1), 1.0)
    assert np.all((out.M.data > 0) & (out.M.data < 1))
    assert out.semantic().dtype == np.uint8


def test_forward_golden(model, bundle):
    with nx.no_grad():
        out = forward_scene(model, bundle)
    g = GOLDEN["forward_scene"]
    assert out.A.data[0, 0] == pytest.approx(g["A_00"], rel=1e-9)
    assert out.A.data.mean() == pytest.approx(g["A_mean"], rel=1e-9)
    assert out.S.data.mean() == pytest.approx(g["S_mean"], rel=1e-9)
    np.testing.assert_allclose(out.P.data[0], g["P_row0"], rtol=1e-9)
    assert np.bincount(out.semantic().ravel(), minlength=6).tolist() == g["semantic_hist"]


def test_prompts_golden(model):
    pr = model.prompts()
    g = GOLDEN["project_prompts"]
    np.testing.assert_allclose(pr.class_prototypes.data[:, :4], g["class_prototypes"], rtol=1e-10)
    np.testing.assert_allclose(pr.dist_prototypes.data[:, :4], g["dist_prototypes"], rtol=1e-10)
    assert pr.rows.shape == (SMALL_MODEL.num_classes + 3, SMALL_MODEL.mask_dim)


def test_pra_layer_golden(model, bundle):
    with nx.no_grad():
        f4, fm = model._decode_coarse(bundle)
        st = QueryState(model["query.feat"], model.positional)
        out = model.pra_layer(st, f4, model._mask_for(st.queries, fm, (1, 2)), model.prompts())
    g = GOLDEN["pra_layer"]
    np.testing.assert_allclose(out.queries.data[0, :6], g["queries_row0"], rtol=1e-9)
    assert np.abs(out.queries.data).sum() == pytest.approx(g["sum_abs"], rel=1e-9)


def test_model_init_is_deterministic():
    a, b = POSModel(SMALL_MODEL), POSModel(SMALL_MODEL)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert pa.name == pb.name
        np.testing.assert_array_equal(pa.data, pb.data)
    assert a["layer0.gate"].data == 0.0


def test_pixel_decode_full_resolution_matches_coarse(model, bundle):
    with nx.no_grad():
        _, fm_full = model.pixel_decode(bundle)
        _, fm = model._decode_coarse(bundle)
    np.testing.assert_array_equal(fm_full.data[:, ::4, ::4], fm.data)
    np.testing.assert_array_equal(fm_full.data[:, 3::4, 3::4], fm.data)


def test_text_encoder():
    e = synth_text_encode([0, 1, 1000], template_count=3, seed=1, dim=16)
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0)
    np.testing.assert_array_equal(e, synth_text_encode([0, 1, 1000], template_count=3, seed=1, dim=16))
    assert not np.allclose(e, synth_text_encode([0, 1, 1000], template_count=2, seed=1, dim=16))
    with pytest.raises(ContractError):
        synth_text_encode([1, 1])


def test_external_text_embeddings(tmp_path):
    K, dim = SMALL_MODEL.num_classes, SMALL_MODEL.text_dim
    raw = np.random.default_rng(0).standard_normal((K + 3, dim))
    write_raster(tmp_path / "t.pose", raw, "embedding")
    m = POSModel(ModelConfig(**{**SMALL_MODEL.__dict__, "text_embeddings": str(tmp_path / "t.pose")}))
    np.testing.assert_array_equal(m.prompts().raw_text_embeddings.data, raw)
    write_raster(tmp_path / "bad.pose", raw[:-1], "embedding")
    with pytest.raises(DimensionError):
        POSModel(ModelConfig(**{**SMALL_MODEL.__dict__, "text_embeddings": str(tmp_path / "bad.pose")}))


def test_project_prompts_shape_check():
    with pytest.raises(DimensionError):
        project_prompts(np.zeros((5, 4)), Tensor(np.zeros((4, 2))), num_classes=3)
    ps = project_prompts(np.eye(6), Tensor(np.arange(12.0).reshape(6, 2)), num_classes=3)
    np.testing.assert_array_equal(ps.p_out.data, [10.0, 11.0])


def test_attention_mask_threshold():
    m = build_attention_mask(np.array([[0.49, 0.5, 0.9], [0.1, 0.2, 0.3]]))
    np.testing.assert_array_equal(m.values, [[-LARGE, 0, 0], [-LARGE, -LARGE, -LARGE]])
    np.testing.assert_array_equal(m.fully_masked, [False, True])


def test_masked_attention_blocking_and_uniform_fallback():
    rng = np.random.default_rng(0)
    x, f = Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((4, 3)))
    eye = Tensor(np.eye(3))
    mask = AttentionMask(np.array([[0.0, -LARGE, -LARGE, -LARGE], [-LARGE] * 4]))
    out = masked_attention(x, f, mask, eye, eye, eye).data
    np.testing.assert_allclose(out[0], f.data[0])
    np.testing.assert_allclose(out[1], f.data.mean(axis=0))
    with pytest.raises(DimensionError):
        masked_attention(x, f, AttentionMask(np.zeros((2, 3))), eye, eye, eye)


def test_aggregate_and_rba_match_reference():
    rng = np.random.default_rng(1)
    P = rng.dirichlet(np.ones(3), size=5)
    M = rng.random((5, 2, 4))
    S = aggregate_logits(Tensor(P), Tensor(M)).data
    np.testing.assert_allclose(S, np.einsum("nk,nhw->khw", P, M))
    np.testing.assert_allclose(rba_score(Tensor(S)).data, ref_rba(S))


def test_bundle_consistency_checks(model):
    scene = generate_scene(SMALL_SCENE, 1)
    b = FeatureBundle.from_scene(scene, (4, 8, 16))
    with pytest.raises(DimensionError):
        model.forward(b)
    b = FeatureBundle.from_scene(scene)
    b.rasters[8] = b.rasters[8][:, :2]
    with pytest.raises(DimensionError):
        model.forward(b)


def test_stride_contract():
    with pytest.raises(ContractError):
        POSModel(ModelConfig(num_queries=2, query_dim=4, mask_dim=4, text_dim=4, ffn_dim=4, strides=(8, 4, 16, 32)))


def test_without_pra_prompts_do_not_reach_queries(bundle):
    m = POSModel(ModelConfig(**{**SMALL_MODEL.__dict__, "use_pra": False}))
    with nx.no_grad():
        a = m.forward(bundle)
        m["prompt.proj"].data *= 2.0
        b = m.forward(bundle)
    np.testing.assert_array_equal(a.A.data, b.A.data)
