"""Consistency scoring, adaptive threshold, and pseudo-label assembly."""

import json

import numpy as np
import pytest

from celldistill.grids import DataError, save_binary_mask
from celldistill.morphology import center_point
from celldistill.scoring import (CachedOracle, FileBridgeOracle,
                                 PseudoLabelPair, adaptive_threshold,
                                 build_pseudo_masks, classify_instances,
                                 report_payload, score_image, score_instance,
                                 topk_confidence_curve, write_prompts)


class MapOracle:
    """Proposals from a prompt-keyed dict; unknown prompts raise."""

    def __init__(self, proposals):
        self.proposals = proposals
        self.calls = 0

    def propose(self, image_id, row, col):
        self.calls += 1
        return self.proposals[(image_id, row, col)]


def brute_labels(confidences, delta):
    out = []
    for c in confidences:
        if c > delta:
            out.append(1)
        elif c == 0.0:
            out.append(0)
        else:
            out.append(-1)
    return np.array(out, dtype=np.int8)


class TestScoreInstance:
    def test_identical_masks(self):
        mask = np.zeros((5, 5), dtype=np.uint8)
        mask[1:3, 1:4] = 1
        assert score_instance(mask, mask) == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((5, 5), dtype=np.uint8)
        b = np.zeros((5, 5), dtype=np.uint8)
        a[0, 0] = 1
        b[4, 4] = 1
        assert score_instance(a, b) == 0.0

    def test_one_shared_of_three(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        a[0, 0] = a[0, 1] = 1
        b[0, 1] = b[0, 2] = 1
        assert score_instance(a, b) == pytest.approx(1 / 3)

    def test_empty_union_scores_zero(self):
        empty = np.zeros((3, 3), dtype=np.uint8)
        assert score_instance(empty, empty) == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            score_instance(np.zeros((3, 3)), np.zeros((3, 4)))


class TestAdaptiveThreshold:
    def test_frozen_three_point_pool(self):
        report = adaptive_threshold([0.2, 0.4, 0.6])
        assert report.mean == pytest.approx(0.4, abs=1e-15)
        assert report.std == pytest.approx(0.16329931618554522, abs=1e-12)
        assert report.delta == pytest.approx(0.5632993161855452, abs=1e-12)

    def test_frozen_mixed_pool_labels(self):
        report = adaptive_threshold([0.9, 0.3, 0.0])
        assert report.delta == pytest.approx(0.7741657386773941, abs=1e-12)
        assert report.labels.tolist() == [1, -1, 0]

    def test_single_score_is_rejected(self):
        report = adaptive_threshold([0.8])
        assert report.delta == pytest.approx(0.8)
        assert report.labels.tolist() == [-1]

    def test_equal_scores_all_rejected(self):
        report = adaptive_threshold([0.5, 0.5, 0.5, 0.5])
        assert report.delta == pytest.approx(0.5)
        assert report.labels.tolist() == [-1, -1, -1, -1]

    def test_all_zero_scores_are_background(self):
        report = adaptive_threshold([0.0, 0.0])
        assert report.delta == 0.0
        assert report.labels.tolist() == [0, 0]

    def test_empty_pool_rejected(self):
        with pytest.raises(ValueError):
            adaptive_threshold([])

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            adaptive_threshold([0.5], mode="median")

    def test_ratio_mode_frozen_value(self):
        report = adaptive_threshold([0.2, 0.4, 0.6], mode="std_over_mean")
        assert report.delta == pytest.approx(0.4082482904638631, abs=1e-12)
        assert report.labels.tolist() == [-1, -1, 1]

    def test_ratio_mode_zero_mean(self):
        report = adaptive_threshold([0.0, 0.0], mode="std_over_mean")
        assert report.delta == 0.0
        assert report.labels.tolist() == [0, 0]


class TestClassifyInstances:
    def test_matches_brute_force_on_random_pools(self):
        rng = np.random.default_rng(6021)
        for _ in range(200):
            n = int(rng.integers(1, 13))
            conf = rng.uniform(0.0, 1.0, size=n)
            conf[rng.random(n) < 0.3] = 0.0
            delta = adaptive_threshold(conf).delta
            got = classify_instances(conf, delta)
            assert got.tolist() == brute_labels(conf, delta).tolist()

    def test_every_instance_gets_exactly_one_label(self):
        rng = np.random.default_rng(99)
        conf = rng.uniform(0, 1, size=40)
        labels = classify_instances(conf, adaptive_threshold(conf).delta)
        assert set(labels.tolist()) <= {1, 0, -1}
        assert labels.shape == conf.shape

    def test_tie_at_threshold_rejected(self):
        labels = classify_instances([0.6, 0.2], delta=0.6)
        assert labels.tolist() == [-1, -1]

    def test_raising_confidence_never_unaccepts(self):
        delta = 0.45
        grid = np.linspace(0.0, 1.0, 101)
        accepted_from = None
        for c in grid:
            if classify_instances([c], delta)[0] == 1:
                accepted_from = c
                break
        assert accepted_from is not None
        higher = grid[grid >= accepted_from]
        assert (classify_instances(higher, delta) == 1).all()


def three_instance_fixture():
    instances = np.zeros((8, 8), dtype=np.int32)
    instances[1:4, 1:4] = 1
    instances[5:7, 1:6] = 2
    instances[1:3, 6:8] = 3
    return instances


class TestScoreImage:
    def test_single_exact_proposal_accepted(self):
        instances = three_instance_fixture()
        prompts = {i: center_point((instances == i).astype(np.uint8))
                   for i in (1, 2, 3)}
        proposals = {
            ("img", *prompts[1]): (instances == 1).astype(np.uint8),
            ("img", *prompts[2]): np.zeros((8, 8), dtype=np.uint8),
            ("img", *prompts[3]): np.zeros((8, 8), dtype=np.uint8),
        }
        scored, report = score_image("img", instances, MapOracle(proposals))
        confs = [item.confidence for item in scored]
        assert confs == [1.0, 0.0, 0.0]
        assert [item.label for item in scored] == [1, 0, 0]
        assert report.delta < 1.0
        for item in scored:
            assert item.mask[item.prompt] and instances[item.prompt] == item.id

    def test_oracle_exception_is_a_miss(self):
        instances = three_instance_fixture()
        prompts = {i: center_point((instances == i).astype(np.uint8))
                   for i in (1, 2, 3)}
        proposals = {
            ("img", *prompts[1]): (instances == 1).astype(np.uint8),
            ("img", *prompts[2]): (instances == 2).astype(np.uint8),
        }
        scored, _ = score_image("img", instances, MapOracle(proposals))
        missed = scored[2]
        assert missed.confidence == 0.0
        assert missed.label == 0
        assert missed.proposal.sum() == 0

    def test_empty_instance_map(self):
        scored, report = score_image(
            "img", np.zeros((4, 4), dtype=np.int32), MapOracle({}))
        assert scored == []
        assert report.delta == 0.0
        assert report.labels.size == 0

    def test_payload_schema_roundtrips(self):
        instances = three_instance_fixture()
        prompts = {i: center_point((instances == i).astype(np.uint8))
                   for i in (1, 2, 3)}
        proposals = {("img", *prompts[i]): (instances == i).astype(np.uint8)
                     for i in (1, 2, 3)}
        scored, report = score_image("img", instances, MapOracle(proposals))
        payload = json.loads(json.dumps(report_payload(scored, report)))
        assert [item["id"] for item in payload["instances"]] == [1, 2, 3]
        entry = payload["instances"][0]
        assert set(entry) == {"id", "prompt", "confidence", "label"}
        assert set(payload["threshold"]) == {"mean", "std", "delta"}


class TestBuildPseudoMasks:
    def test_hand_enumerated_mixed_grid(self):
        instances = np.zeros((6, 6), dtype=np.int32)
        instances[1:4, 1:4] = 1  # accepted 3x3 square
        instances[5, 0:3] = 2  # uncertain strip
        instances[0, 5] = 3  # certain-background dot
        pair = build_pseudo_masks(instances, {1: 1, 2: -1, 3: 0})
        binary = np.zeros((6, 6), dtype=np.uint8)
        binary[1:4, 1:4] = 1
        edge = binary.copy()
        edge[2, 2] = 0  # 3x3 square: every pixel but the center is boundary
        ignore = np.zeros((6, 6), dtype=bool)
        ignore[5, 0:3] = True
        assert (pair.binary == binary).all()
        assert (pair.edge == edge).all()
        assert (pair.ignore == ignore).all()

    def test_soundness_sets_match_exactly(self):
        instances = np.zeros((16, 16), dtype=np.int32)
        instances[1:5, 1:5] = 1
        instances[6:12, 3:7] = 2
        instances[2:6, 9:15] = 3
        instances[9:14, 10:13] = 4
        labels = {1: 1, 2: -1, 3: 1, 4: 0}
        pair = build_pseudo_masks(instances, labels)
        fg_union = (instances == 1) | (instances == 3)
        assert ((pair.binary == 1) == fg_union).all()
        assert (pair.ignore == (instances == 2)).all()
        assert not pair.edge[pair.binary == 0].any()

    def test_rejected_instance_is_ignored_everywhere(self):
        instances = np.zeros((5, 5), dtype=np.int32)
        instances[1:4, 1:4] = 1
        pair = build_pseudo_masks(instances, {1: -1})
        assert pair.binary.sum() == 0
        assert pair.edge.sum() == 0
        assert (pair.ignore == (instances == 1)).all()

    def test_missing_label_rejected(self):
        instances = np.zeros((4, 4), dtype=np.int32)
        instances[0, 0] = 1
        with pytest.raises(ValueError):
            build_pseudo_masks(instances, {})

    def test_bad_label_value_rejected(self):
        instances = np.zeros((4, 4), dtype=np.int32)
        instances[0, 0] = 1
        with pytest.raises(ValueError):
            build_pseudo_masks(instances, {1: 2})

    def test_is_frozen_pair(self):
        pair = build_pseudo_masks(np.zeros((2, 2), dtype=np.int32), {})
        assert isinstance(pair, PseudoLabelPair)
        with pytest.raises(AttributeError):
            pair.binary = None


def shard_fixture():
    """Five exact gt matches plus five 2-px shards of other gt cells."""
    gt = np.zeros((20, 20), dtype=np.int32)
    instances = np.zeros((20, 20), dtype=np.int32)
    for i in range(5):
        r = 1 + 4 * (i % 4)
        c = 1 + 5 * (i // 4) * 2
        gt[r:r + 3, c:c + 3] = i + 1
        instances[r:r + 3, c:c + 3] = i + 1
    for i in range(5):
        r = 2 + 3 * (i % 5)
        gt[r, 14:19] = 6 + i
        instances[r, 14:16] = 6 + i
    return gt, instances


class TestTopkCurve:
    def test_exact_oracle_tops_at_one(self):
        gt, instances = shard_fixture()
        prompts = {i: center_point((instances == i).astype(np.uint8))
                   for i in range(1, 11)}
        proposals = {("img", *prompts[i]): (gt == i).astype(np.uint8)
                     for i in range(1, 11)}
        scored, _ = score_image("img", instances, MapOracle(proposals))
        points = topk_confidence_curve(scored, gt, ks=(1, 50))
        assert points[0].count == 1
        assert points[0].aji == 1.0
        top50 = points[1]
        assert top50.count == 5
        assert top50.aji == 1.0  # the five exact matches outrank the shards
        assert top50.random_aji < top50.aji

    def test_needs_ground_truth(self):
        gt, instances = shard_fixture()
        prompts = {1: center_point((instances == 1).astype(np.uint8))}
        proposals = {("img", *prompts[1]): (gt == 1).astype(np.uint8)}
        scored, _ = score_image(
            "img", (instances == 1).astype(np.int32), MapOracle(proposals))
        with pytest.raises(DataError):
            topk_confidence_curve(scored, None)

    def test_empty_and_bad_k_rejected(self):
        gt, _ = shard_fixture()
        with pytest.raises(ValueError):
            topk_confidence_curve([], gt)
        instances = (gt == 1).astype(np.int32)
        prompts = {1: center_point((gt == 1).astype(np.uint8))}
        proposals = {("img", *prompts[1]): (gt == 1).astype(np.uint8)}
        scored, _ = score_image("img", instances, MapOracle(proposals))
        with pytest.raises(ValueError):
            topk_confidence_curve(scored, gt, ks=(0,))

    def test_baseline_deterministic(self):
        gt, instances = shard_fixture()
        prompts = {i: center_point((instances == i).astype(np.uint8))
                   for i in range(1, 11)}
        proposals = {("img", *prompts[i]): (gt == i).astype(np.uint8)
                     for i in range(1, 11)}
        scored, _ = score_image("img", instances, MapOracle(proposals))
        a = topk_confidence_curve(scored, gt, ks=(10, 30))
        b = topk_confidence_curve(scored, gt, ks=(10, 30))
        assert a == b


class TestOracles:
    def test_cached_oracle_memoizes(self):
        mask = np.eye(4, dtype=np.uint8)
        inner = MapOracle({("img", 1, 2): mask})
        oracle = CachedOracle(inner)
        first = oracle.propose("img", 1, 2)
        second = oracle.propose("img", 1, 2)
        assert inner.calls == 1
        assert (first == mask).all() and (second == mask).all()

    def test_cached_oracle_returns_private_copies(self):
        mask = np.eye(4, dtype=np.uint8)
        oracle = CachedOracle(MapOracle({("img", 0, 0): mask}))
        stolen = oracle.propose("img", 0, 0)
        stolen[:] = 9
        assert (oracle.propose("img", 0, 0) == np.eye(4)).all()

    def test_cached_oracle_distinct_prompts(self):
        inner = MapOracle({("img", 0, 0): np.zeros((2, 2), dtype=np.uint8),
                           ("img", 1, 1): np.ones((2, 2), dtype=np.uint8)})
        oracle = CachedOracle(inner)
        oracle.propose("img", 0, 0)
        oracle.propose("img", 1, 1)
        assert inner.calls == 2

    def test_file_bridge_roundtrip(self, tmp_path):
        mask = np.zeros((6, 6), dtype=np.uint8)
        mask[2:5, 1:3] = 1
        bridge = FileBridgeOracle(tmp_path)
        path = bridge.proposal_path("img_a", 3, 2)
        path.parent.mkdir(parents=True)
        save_binary_mask(mask, path)
        got = bridge.propose("img_a", 3, 2)
        assert (got != 0).astype(np.uint8).tolist() == mask.tolist()

    def test_file_bridge_missing_proposal(self, tmp_path):
        bridge = FileBridgeOracle(tmp_path)
        with pytest.raises(DataError):
            bridge.propose("img_a", 0, 0)

    def test_missing_bridge_file_scores_zero(self, tmp_path):
        instances = np.zeros((6, 6), dtype=np.int32)
        instances[2:5, 2:5] = 1
        scored, _ = score_image("img", instances, FileBridgeOracle(tmp_path))
        assert scored[0].confidence == 0.0
        assert scored[0].label == 0

    def test_write_prompts_schema(self, tmp_path):
        path = write_prompts(tmp_path, [("a", 1, 2), ("b", 3, 4)])
        payload = json.loads(path.read_text())
        assert payload == [{"image_id": "a", "row": 1, "col": 2},
                           {"image_id": "b", "row": 3, "col": 4}]
