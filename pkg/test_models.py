"""Tests for backbones, heads, losses, compatibility spaces and task pipelines"""

import math
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F

import compatibility
from annotation_io import FITBQuestion, Landmark, LandmarkRecord
from backbones import FeatureMap, TinyConv, backbone_forward, global_pool, landmark_pool, pool_landmarks
from compatibility import TypePairSpace, TypeSpaces, compat_distance, fitb_answer, fitb_scores, outfit_score
from config_core import load_config, merge_config
from fashion_data import LandmarkDataset, PolyvoreDataset, RetrievalDataset
from fashion_errors import ConfigError
from heads import (AttrHead, LandmarkHead, LandmarkPrediction, RetrievalHead, attribute_loss, landmark_loss,
                   retrieval_embed, triplet_loss)
from pipelines import AttributePredictor, build_model, to_pixels
from synthetic_data import synth_dataset, write_synthetic
from train_runner import build_runner

CONFIGS = Path(__file__).resolve().parent / "configs"
LN2 = math.log(2.0)
SEEDS = range(20)


def _lookup(table, kind="item"):
    return lambda item_id: (torch.as_tensor(table[item_id], dtype=torch.float64), kind)


class TestBackbone:

    def test_shape_arithmetic(self):
        net = TinyConv(stages=4)
        fm = backbone_forward(np.zeros((64, 64, 3), dtype=np.float32), net)
        assert tuple(fm.data.shape) == (128, 4, 4) and fm.stride == 16
        fm = backbone_forward(np.zeros((64, 80, 3), dtype=np.float32), net)
        assert tuple(fm.data.shape) == (128, 4, 5)

    def test_below_minimum_size(self):
        with pytest.raises(ValueError, match="at least 16x16"):
            backbone_forward(np.zeros((8, 8, 3), dtype=np.float32), TinyConv(stages=4))

    def test_shape_contract_over_sizes(self):
        net = TinyConv(stages=4)
        rng = np.random.default_rng(0)
        for height, width in rng.integers(16, 257, size=(6, 2)):
            out = net(torch.zeros(1, 3, int(height), int(width)))
            assert tuple(out.shape[1:]) == net.output_shape(int(height), int(width))

    def test_bad_channel_list(self):
        with pytest.raises(ValueError):
            TinyConv(stages=2, channels=[16])


class TestPooling:

    def test_global_pool(self):
        assert torch.equal(global_pool(torch.full((3, 2, 2), 2.5)), torch.full((3,), 2.5))
        assert global_pool(torch.tensor([[[1.0, 3.0], [5.0, 7.0]]])).tolist() == [4.0]
        assert torch.equal(global_pool(FeatureMap(torch.zeros(4, 3, 3), 8)), torch.zeros(4))

    def test_all_invisible_gives_zeros(self):
        features = torch.rand(1, 5, 4, 4)
        pooled = pool_landmarks(features, torch.rand(1, 3, 2) * 16, torch.zeros(1, 3), stride=4)
        assert torch.equal(pooled, torch.zeros(1, 15))

    def test_constant_map(self):
        record = LandmarkRecord("a", "a", (32, 32), (Landmark(0.0, 0.0, False), Landmark(12.0, 20.0, True)))
        pooled = landmark_pool(FeatureMap(torch.full((2, 4, 4), 1.5), 8), record)
        assert pooled.tolist() == [0.0, 0.0, 1.5, 1.5]

    def test_ramp_window_max(self):
        ramp = torch.arange(25, dtype=torch.float32).reshape(1, 1, 5, 5)
        centre = pool_landmarks(ramp, torch.tensor([[[9.0, 9.0]]]), torch.ones(1, 1), stride=4)
        # rows 1..3, cols 1..3 around grid cell (2, 2)
        assert centre.item() == 18.0
        corner = pool_landmarks(ramp, torch.tensor([[[0.0, 0.0]]]), torch.ones(1, 1), stride=4)
        assert corner.item() == 6.0

    def test_invisible_permutation_only_moves_zero_blocks(self):
        features = torch.rand(1, 3, 4, 4)
        coords = torch.tensor([[[4.0, 4.0], [20.0, 8.0], [9.0, 30.0]]])
        visible = torch.tensor([[1.0, 0.0, 0.0]])
        pooled = pool_landmarks(features, coords, visible, stride=8).reshape(3, 3)
        swapped = pool_landmarks(features, coords[:, [0, 2, 1]], visible, stride=8).reshape(3, 3)
        assert torch.equal(pooled, swapped)
        assert torch.equal(pooled[1:], torch.zeros(2, 3))

    def test_predicted_landmarks_need_image_size(self):
        pred = LandmarkPrediction(torch.full((2, 2), 0.5), torch.tensor([5.0, -5.0]))
        fm = FeatureMap(torch.ones(1, 4, 4), 8)
        assert landmark_pool(fm, pred, image_size=(32, 32)).tolist() == [1.0, 0.0]
        with pytest.raises(ValueError):
            landmark_pool(fm, pred)


class TestLosses:

    def test_attribute_loss_values(self):
        assert attribute_loss(torch.tensor([0.0]), torch.tensor([1.0])).item() == pytest.approx(LN2)
        assert attribute_loss(torch.tensor([100.0, -100.0]), torch.tensor([1.0, 0.0])).item() == pytest.approx(0.0)
        assert attribute_loss(torch.tensor([0.0, 0.0]), torch.tensor([1.0, 0.0])).item() == pytest.approx(LN2)

    def test_attribute_head_shape(self):
        head = AttrHead(in_features=8, num_attributes=5)
        assert head(torch.zeros(3, 8)).shape == (3, 5)

    def test_triplet_loss_values(self):
        a = torch.tensor([[1.0, 0.0]])
        assert triplet_loss(a, a.clone(), torch.tensor([[-1.0, 0.0]])).item() == 0.0
        p = torch.tensor([[1.5, 0.5]])
        assert triplet_loss(a, p, a.clone(), margin=0.3).item() == pytest.approx(0.8)

    def test_triplet_loss_formula(self):
        rng = np.random.default_rng(1)
        vectors = rng.normal(size=(3, 4, 6))
        vectors /= np.linalg.norm(vectors, axis=-1, keepdims=True)
        a, p, n = (torch.from_numpy(v) for v in vectors)
        expected = np.mean(np.maximum(0.0, np.sum((vectors[0] - vectors[1]) ** 2, axis=1)
                                      - np.sum((vectors[0] - vectors[2]) ** 2, axis=1) + 0.3))
        assert triplet_loss(a, p, n, 0.3).item() == pytest.approx(expected)

    def test_landmark_loss_values(self):
        coords = torch.tensor([[[0.2, 0.4], [0.5, 0.5]]])
        visible = torch.tensor([[1.0, 0.0]])
        confident = torch.tensor([[50.0, -50.0]])
        assert landmark_loss(LandmarkPrediction(coords, confident), coords, visible).item() == pytest.approx(0.0)

        hidden = torch.zeros(1, 2)
        logits = torch.tensor([[-2.0, 1.0]])
        loss = landmark_loss(LandmarkPrediction(torch.rand(1, 2, 2), logits), torch.rand(1, 2, 2), hidden)
        assert loss.item() == pytest.approx(F.binary_cross_entropy_with_logits(logits, hidden).item())

        shifted = torch.tensor([[[0.3, 0.6]]])
        loss = landmark_loss(LandmarkPrediction(shifted, torch.tensor([[50.0]])), torch.tensor([[[0.2, 0.4]]]),
                             torch.tensor([[1.0]]))
        assert loss.item() == pytest.approx(0.025, abs=1e-6)

    def test_landmark_head_range(self):
        pred = LandmarkHead(in_features=8, num_landmarks=3)(torch.randn(2, 8, 2, 2) * 10)
        assert pred.coords.shape == (2, 3, 2) and pred.vis_logit.shape == (2, 3)
        assert (pred.coords >= 0).all() and (pred.coords <= 1).all()

    def test_retrieval_embedding_norm(self):
        head = RetrievalHead(in_features=8, embed_dim=16)
        embedding = retrieval_embed(torch.randn(5, 8) * 3, head)
        assert embedding.normalized
        norms = embedding.vector.norm(dim=1)
        assert torch.allclose(norms, torch.ones(5), atol=1e-6)


class TestGradients:

    @pytest.mark.parametrize("seed", SEEDS)
    def test_attribute_loss(self, seed):
        torch.manual_seed(seed)
        logits = torch.randn(4, 5, dtype=torch.float64, requires_grad=True)
        labels = (torch.rand(4, 5) < 0.5).double()
        assert torch.autograd.gradcheck(lambda x: attribute_loss(x, labels), (logits,), eps=1e-4, rtol=1e-4)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_triplet_loss(self, seed):
        torch.manual_seed(seed)
        inputs = tuple(torch.randn(3, 4, dtype=torch.float64, requires_grad=True) for _ in range(3))
        assert torch.autograd.gradcheck(lambda a, p, n: triplet_loss(a, p, n, 0.3), inputs, eps=1e-4, rtol=1e-4)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_landmark_loss(self, seed):
        torch.manual_seed(seed)
        coords = torch.rand(2, 3, 2, dtype=torch.float64, requires_grad=True)
        logits = torch.randn(2, 3, dtype=torch.float64, requires_grad=True)
        gt = torch.rand(2, 3, 2, dtype=torch.float64)
        visible = (torch.rand(2, 3) < 0.6).double()
        assert torch.autograd.gradcheck(lambda c, v: landmark_loss(LandmarkPrediction(c, v), gt, visible),
                                        (coords, logits), eps=1e-4, rtol=1e-4)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_compat_distance_parameters(self, seed):
        torch.manual_seed(seed)
        e1, e2 = torch.randn(2, 6, dtype=torch.float64).unbind(0)
        weight = torch.rand(6, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(
            lambda w: compat_distance(e1, e2, TypePairSpace(("a", "b"), "learned_metric", weight=w)),
            (weight,), eps=1e-4, rtol=1e-4)
        matrix = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
        bias = torch.randn(4, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(
            lambda m, b: compat_distance(e1, e2, TypePairSpace(("a", "b"), "fully_connected",
                                                               linear=lambda e: F.linear(e, m, b))),
            (matrix, bias), eps=1e-4, rtol=1e-4)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_compat_triplet_loss(self, seed):
        torch.manual_seed(seed)
        spaces = TypeSpaces(["top", "shoe"], embed_dim=4, strategy="learned_metric").double()
        inputs = tuple(torch.randn(3, 4, dtype=torch.float64, requires_grad=True) for _ in range(3))
        types = (["top"] * 3, ["shoe"] * 3)
        assert torch.autograd.gradcheck(
            lambda a, p, n: compatibility.compat_triplet_loss(spaces, a, p, n, *types, margin=0.2),
            inputs, eps=1e-4, rtol=1e-4)


class TestCompatibility:

    @pytest.mark.parametrize("strategy", ["fully_connected", "learned_metric"])
    def test_identity_and_symmetry(self, strategy):
        torch.manual_seed(3)
        spaces = TypeSpaces(["top", "shoe"], embed_dim=8, strategy=strategy)
        e1, e2 = torch.randn(2, 8).unbind(0)
        space = spaces.space("shoe", "top")
        assert compat_distance(e1, e1, space).item() == 0.0
        assert compat_distance(e1, e2, space).item() == compat_distance(e2, e1, space).item()
        assert spaces.space("top", "shoe").pair == space.pair == ("shoe", "top")

    def test_unit_weights_match_general_distance(self):
        spaces = TypeSpaces(["top", "shoe"], embed_dim=5, strategy="learned_metric")
        e1, e2 = torch.randn(2, 5).unbind(0)
        assert spaces.distance(e1, e2, "top", "shoe").item() == pytest.approx(torch.dist(e1, e2).item())

    def test_single_weight_projects_one_coordinate(self):
        e1, e2 = torch.randn(2, 4).unbind(0)
        space = TypePairSpace(("a", "b"), "learned_metric", weight=torch.tensor([1.0, 0.0, 0.0, 0.0]))
        assert compat_distance(e1, e2, space).item() == pytest.approx(abs((e1[0] - e2[0]).item()))

    def test_unknown_pair_uses_general_space(self, caplog):
        spaces = TypeSpaces(["top", "shoe"], embed_dim=4)
        assert spaces.space("hat", "top").is_general
        spaces.space("top", "hat")
        assert caplog.text.count("hat|top") == 1

    def test_fitb_answer_rules(self):
        spaces = TypeSpaces([], embed_dim=2)
        table = {"c": [0.0, 0.0], "x0": [5.0, 5.0], "x1": [4.0, 0.0], "x2": [0.0, 0.0], "x3": [9.0, 1.0]}
        question = FITBQuestion(("c",), ("x0", "x1", "x2", "x3"), 2)
        assert fitb_answer(question, _lookup(table), spaces) == 2
        same = {k: [1.0, 1.0] for k in table}
        assert fitb_answer(question, _lookup(same), spaces) == 0
        with pytest.raises(ValueError):
            fitb_scores((), ("x0",), _lookup(table), spaces)

    def test_fitb_matches_brute_force(self):
        rng = np.random.default_rng(4)
        spaces = TypeSpaces([], embed_dim=3)
        for _ in range(20):
            table = {name: rng.normal(size=3) for name in ("c0", "c1", "a", "b", "c", "d")}
            question = FITBQuestion(("c0", "c1"), ("a", "b", "c", "d"), 0)
            brute = [np.mean([np.linalg.norm(table[cand] - table[ctx]) for ctx in question.context])
                     for cand in question.candidates]
            answer = fitb_answer(question, _lookup(table), spaces)
            assert answer == int(np.argmin(brute))
            assert answer == int(np.argmin(np.exp(fitb_scores(question.context, question.candidates,
                                                               _lookup(table), spaces))))

    def test_outfit_score(self):
        spaces = TypeSpaces([], embed_dim=1)
        assert outfit_score(["a", "b"], _lookup({"a": [3.0], "b": [3.0]}), spaces) == 0.0
        assert outfit_score(["a", "b"], _lookup({"a": [0.0], "b": [2.0]}), spaces) == pytest.approx(-2.0)
        points = {"a": [0.0], "b": [1.0], "c": [3.0]}
        assert outfit_score(["a", "b", "c"], _lookup(points), spaces) == pytest.approx(-2.0)
        with pytest.raises(ValueError):
            outfit_score(["a"], _lookup(points), spaces)

    def test_triplet_loss_is_zero_when_separated(self):
        spaces = TypeSpaces(["top", "shoe"], embed_dim=2, strategy="learned_metric")
        anchor = torch.tensor([[0.0, 0.0]])
        loss = compatibility.compat_triplet_loss(spaces, anchor, anchor.clone(), torch.tensor([[3.0, 0.0]]),
                                                 ["top"], ["shoe"], margin=0.2)
        assert loss.item() == 0.0

    def test_unknown_strategy(self):
        with pytest.raises(ValueError):
            TypeSpaces(["top"], embed_dim=2, strategy="cosine")


class TestPipelines:

    def test_attribute_model_from_config(self):
        model = build_model(load_config(CONFIGS / "attribute.json"))
        assert isinstance(model, AttributePredictor) and model.pooling == "landmark"
        images = torch.zeros(2, 3, 64, 64)
        logits = model(images, torch.full((2, 6, 2), 30.0), torch.ones(2, 6))
        assert logits.shape == (2, 6)
        batch = {"image": images, "landmarks": torch.zeros(2, 6, 2), "visible": torch.zeros(2, 6),
                 "labels": torch.ones(2, 6)}
        loss = model.train_step(batch)
        assert loss.dim() == 0 and loss.requires_grad

    def test_build_is_seeded(self):
        cfg = load_config(CONFIGS / "retrieval.json")
        a, b = build_model(cfg), build_model(cfg)
        for (name, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert torch.equal(pa, pb), name

    def test_missing_model_type(self):
        cfg = merge_config(load_config(CONFIGS / "landmark.json"), {"model": {"type": "Nope"}})
        with pytest.raises(ConfigError):
            build_model(cfg)
        with pytest.raises(ConfigError, match="model.type"):
            build_model(load_config(CONFIGS / "detection.json"))

    def test_landmark_predictions_inside_image(self, landmark_dir):
        model = build_model(load_config(CONFIGS / "landmark.json"))
        dataset = LandmarkDataset(landmark_dir / "landmarks.txt")
        document = model.predict(dataset)
        assert document["task"] == "landmark" and len(document["landmarks"]) == len(dataset)
        for record in dataset.records:
            width, height = record.image_size
            for x, y, prob in document["landmarks"][record.image_id]:
                assert 0.0 <= x < width and 0.0 <= y < height and 0.0 <= prob <= 1.0
        assert model.training

    def test_saturated_coordinates_stay_inside_the_image(self):
        edge = to_pixels(torch.ones(3, 2), 64, 48)
        assert all(round(x, 6) < 64 and round(y, 6) < 48 for x, y in edge.tolist())
        assert edge[0, 0].item() == pytest.approx(64.0) and edge[0, 1].item() == pytest.approx(48.0)
        assert to_pixels(torch.zeros(1, 2), 64, 48).tolist() == [[0.0, 0.0]]
        assert to_pixels(torch.tensor([[0.5, 0.25]]), 64, 48).tolist() == [[32.0, 12.0]]

    def test_retrieval_embeddings_cover_every_record(self, retrieval_dir):
        model = build_model(load_config(CONFIGS / "retrieval.json"))
        dataset = RetrievalDataset(retrieval_dir / "retrieval_split.txt")
        table = model.predict(dataset)["embeddings"]
        assert set(table) == {r.image_id for r in dataset.records}
        assert all(abs(np.linalg.norm(v) - 1.0) < 1e-5 for v in table.values())

    def test_compat_predictions(self, compat_dir):
        model = build_model(load_config(CONFIGS / "compat.json"))
        document = model.predict(PolyvoreDataset(compat_dir))
        assert len(document["fitb"]) == 6 and all(0 <= a <= 3 for a in document["fitb"])
        assert len(document["compat_scores"]) == 12 and all(s <= 0.0 for s in document["compat_scores"])


def _overfit_config(task, root, seed=0, **extra):
    return merge_config(load_config(CONFIGS / f"{task}.json"),
                        merge_config({"data": {"root": str(root)}, "hooks": [], "seed": seed}, extra))


def _fit(cfg, work_dir, done, max_epochs, every=5):
    """Train in chunks of `every` epochs until done(scalars) or max_epochs; returns (epochs, report)"""
    model = build_model(cfg)
    runner = build_runner(cfg, model, work_dir)
    while True:
        runner.state.max_epochs = min(runner.state.epoch + every, max_epochs)
        runner.run([("train", 1)])
        report = model.evaluate(runner.data["val"], cfg.get("evaluation", None))
        if done(report.scalars) or runner.state.epoch >= max_epochs:
            return runner.state.epoch, report


@pytest.fixture(scope="module")
def overfit_retrieval_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("overfit_retrieval")
    write_synthetic(synth_dataset("retrieval", 16, 0), out)
    return out


@pytest.fixture(scope="module")
def overfit_attribute_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("overfit_attribute")
    write_synthetic(synth_dataset("attribute", 32, 0), out)
    return out


@pytest.mark.slow
class TestOverfit:

    def test_landmark_error_drops_below_five_percent(self, landmark_dir, tmp_path):
        cfg = _overfit_config("landmark", landmark_dir)
        _, report = _fit(cfg, tmp_path, lambda s: s["landmark/NE"] < 0.05, max_epochs=300, every=10)
        assert report.scalars["landmark/NE"] < 0.05

    def test_retrieval_memorizes_sixteen_items(self, overfit_retrieval_dir, tmp_path):
        roles = ["train", "query", "gallery"]
        cfg = _overfit_config("retrieval", overfit_retrieval_dir,
                              data={"train": {"roles": roles}, "val": {"roles": roles}})
        _, report = _fit(cfg, tmp_path, lambda s: s["retrieval/recall@1"] == 1.0, max_epochs=200)
        assert report.scalars["retrieval/recall@1"] == 1.0

    @pytest.mark.parametrize("strategy", ["fully_connected", "learned_metric"])
    def test_compat_answers_every_fitb_question(self, compat_dir, tmp_path, strategy):
        cfg = _overfit_config("compat", compat_dir, model={"strategy": strategy})
        _, report = _fit(cfg, tmp_path, lambda s: s["compat/fitb_accuracy"] == 1.0, max_epochs=200)
        assert report.scalars["compat/fitb_accuracy"] == 1.0

    def test_landmark_pooling_learns_attributes_no_slower_than_global(self, overfit_attribute_dir, tmp_path):
        target = 200

        def epochs_to_recall(pooling, seed):
            cfg = _overfit_config("attribute", overfit_attribute_dir, seed=seed, model={"pooling": pooling})
            epochs, report = _fit(cfg, tmp_path / f"{pooling}_{seed}", lambda s: s["attr/recall@3"] >= 0.9,
                                  max_epochs=target)
            return epochs if report.scalars["attr/recall@3"] >= 0.9 else target + 1

        landmark = [epochs_to_recall("landmark", seed) for seed in range(5)]
        pooled = [epochs_to_recall("global", seed) for seed in range(5)]
        assert max(landmark) <= target
        assert np.median(landmark) <= np.median(pooled)
