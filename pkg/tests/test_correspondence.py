import numpy as np
import pytest
from scipy import stats

from fewshot_nerf.correspondence import (
    CorrespondenceError,
    MatchRecord,
    MatchStack,
    PairedRays,
    aggregate_stacks,
    filter_keep_mask,
    filter_pairs,
    load_correspondences,
    load_labels,
    pair_distances,
    pairs_from_records,
    prefilter_stacks,
    sample_pairs,
    save_correspondences,
    synthetic_match,
)
from fewshot_nerf.geometry import generate_rays, triangulate_midpoint


def rec(ref, conf, key=(1.0, 2.0), target=0, ref_px=(3.0, 4.0)):
    return MatchRecord(target, key, ref, ref_px, conf)


def stack(target, *records):
    return MatchStack(target, {r.target_pixel: r for r in records})


def brute_force(stacks):
    """Per keypoint: scan every candidate, keep the highest confidence, lowest ref index on ties."""
    keys = {k for s in stacks for k in s.records}
    out = {}
    for k in keys:
        cands = [s.records[k] for s in stacks if k in s.records]
        best = max(cands, key=lambda r: (r.confidence, -r.ref_image))
        out[k] = best
    return out


class TestAggregation:
    def test_higher_confidence_wins(self):
        a = stack(0, rec(1, 0.9))
        b = stack(0, rec(2, 0.7))
        assert aggregate_stacks([b, a]).records[(1.0, 2.0)].ref_image == 1

    def test_single_source_kept(self):
        r = rec(3, 0.2, key=(5.0, 5.0))
        out = aggregate_stacks([stack(0, rec(1, 0.9)), stack(0, r)])
        assert out.records[(5.0, 5.0)] is r

    def test_tie_goes_to_lowest_reference(self):
        out = aggregate_stacks([stack(0, rec(4, 0.5)), stack(0, rec(2, 0.5)), stack(0, rec(3, 0.5))])
        assert out.records[(1.0, 2.0)].ref_image == 2

    def test_mismatched_targets(self):
        with pytest.raises(CorrespondenceError):
            aggregate_stacks([stack(0, rec(1, 0.5)), stack(1, rec(2, 0.5, target=1))])

    def test_randomised_against_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            stacks = []
            for ref in (1, 2, 3):
                keys = {(float(u), float(v)) for u, v in rng.integers(0, 6, (12, 2))}
                # coarse confidences so ties happen
                stacks.append(stack(0, *[rec(ref, float(rng.integers(0, 5)) / 4, key=k) for k in keys]))
            order = rng.permutation(3)
            out = aggregate_stacks([stacks[i] for i in order])
            assert out.records == brute_force(stacks)
            assert len(out.records) == len({k for s in stacks for k in s.records})

    def test_record_validation(self):
        with pytest.raises(CorrespondenceError):
            MatchRecord(1, (0.0, 0.0), 1, (0.0, 0.0), 0.5)
        with pytest.raises(CorrespondenceError):
            MatchRecord(0, (0.0, 0.0), 1, (0.0, 0.0), 1.5)


class TestFileFormat:
    def test_empty_file(self, tmp_path):
        (tmp_path / "m.txt").write_text("")
        assert load_correspondences(tmp_path / "m.txt") == []

    def test_single_row(self, tmp_path):
        (tmp_path / "m.txt").write_text("# header\n0 1.5 2.5 1 3.25 4.0 0.75\n")
        [st] = load_correspondences(tmp_path / "m.txt")
        assert st.target_image == 0
        assert st.records[(1.5, 2.5)] == MatchRecord(0, (1.5, 2.5), 1, (3.25, 4.0), 0.75)

    def test_duplicate_keypoint_keeps_max(self, tmp_path):
        (tmp_path / "m.txt").write_text("0 1 1 1 2 2 0.4\n0 1 1 2 3 3 0.8  # second matcher\n")
        [st] = load_correspondences(tmp_path / "m.txt")
        assert len(st) == 1 and st.records[(1.0, 1.0)].confidence == 0.8

    def test_parse_error_has_line_number(self, tmp_path):
        (tmp_path / "m.txt").write_text("0 1 1 1 2 2 0.4\n\n0 1 1 x 2 2 0.4\n")
        with pytest.raises(CorrespondenceError, match=":3:"):
            load_correspondences(tmp_path / "m.txt")

    def test_field_count(self, tmp_path):
        (tmp_path / "m.txt").write_text("0 1 1 1 2 2\n")
        with pytest.raises(CorrespondenceError, match=":1:"):
            load_correspondences(tmp_path / "m.txt")

    def test_bounds(self, tmp_path):
        (tmp_path / "m.txt").write_text("0 1 1 1 20 2 0.4\n")
        with pytest.raises(CorrespondenceError, match="out of bounds"):
            load_correspondences(tmp_path / "m.txt", {0: (16, 16), 1: (16, 16)})

    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        stacks = []
        for t in (0, 2):
            st = MatchStack(t)
            for _ in range(25):
                key = tuple(float(x) for x in rng.integers(0, 32, 2))
                st.records[key] = MatchRecord(t, key, 1, tuple(rng.uniform(0, 32, 2)), float(rng.uniform()))
            st.outliers = set(list(st.records)[:5])
            stacks.append(st)
        save_correspondences(tmp_path / "m.txt", stacks, labels_path=tmp_path / "m.txt.labels")
        back = load_labels(tmp_path / "m.txt.labels", load_correspondences(tmp_path / "m.txt"))
        assert [s.records for s in back] == [s.records for s in stacks]
        assert [s.outliers for s in back] == [s.outliers for s in stacks]


@pytest.fixture(scope="module")
def clean_matches(tiny_scene):
    scene, views = tiny_scene
    ids = scene.train_views
    stacks = synthetic_match(scene, [scene.cameras[i] for i in ids], 80, 0.0, 0.0, np.random.default_rng(0),
                             views=[views[i] for i in ids], image_ids=ids, n_quad=512)
    return scene, views, stacks


class TestSyntheticMatch:
    def test_exact_matches_intersect(self, clean_matches):
        scene, _, stacks = clean_matches
        cams = dict(enumerate(scene.cameras))
        recs = [r for s in stacks for r in s.records.values()]
        assert len(recs) > 50
        dist, _, _, _ = pair_distances(pairs_from_records(recs, cams))
        assert dist.max() < 1e-6

    def test_pairs_triangulate_to_oracle_points(self, clean_matches):
        scene, views, stacks = clean_matches
        cams = dict(enumerate(scene.cameras))
        for st in stacks:
            recs = list(st.records.values())
            p = pairs_from_records(recs, cams)
            kept = filter_pairs(p, 1e-3)
            assert len(kept) == len(p)
            kp = kept.target_pixels.astype(int)
            z = views[st.target_image].depth[kp[:, 1], kp[:, 0]]
            truth = kept.target_origins + z[:, None] * kept.target_dirs
            mid = triangulate_midpoint(kept.target_origins, kept.target_dirs, kept.ref_origins, kept.ref_dirs)
            assert np.abs(mid - truth).max() < 1e-4

    def test_outlier_rate(self, tiny_scene):
        scene, views = tiny_scene
        ids = scene.train_views
        stacks = synthetic_match(scene, [scene.cameras[i] for i in ids], 50, 0.0, 0.2, np.random.default_rng(3),
                                 views=[views[i] for i in ids], image_ids=ids, n_quad=512, max_keypoints=200)
        n = sum(len(s) for s in stacks)
        bad = sum(len(s.outliers) for s in stacks)
        assert n == 200
        lo, hi = stats.binom.ppf([0.0005, 0.9995], n, 0.2)
        assert lo <= bad <= hi

    def test_noise_lowers_confidence(self, tiny_scene):
        scene, views = tiny_scene
        ids = scene.train_views
        stacks = synthetic_match(scene, [scene.cameras[i] for i in ids], 80, 0.5, 0.0, np.random.default_rng(4),
                                 views=[views[i] for i in ids], image_ids=ids, n_quad=512)
        conf = np.array([r.confidence for s in stacks for r in s.records.values()])
        assert np.all((conf > 0) & (conf < 1))

    def test_top_percentile_gives_nothing(self, tiny_scene):
        scene, views = tiny_scene
        ids = scene.train_views
        out = synthetic_match(scene, [scene.cameras[i] for i in ids], 100, 0.0, 0.0, np.random.default_rng(0),
                              views=[views[i] for i in ids], image_ids=ids, n_quad=512)
        assert out == []

    def test_needs_oracle_depth(self, tiny_scene):
        scene, _ = tiny_scene
        with pytest.raises(CorrespondenceError):
            synthetic_match(object(), scene.cameras[:2], 90, 0.0, 0.0, np.random.default_rng(0))

    def test_seeded(self, tiny_scene):
        scene, views = tiny_scene
        ids = scene.train_views
        run = lambda: synthetic_match(scene, [scene.cameras[i] for i in ids], 80, 0.3, 0.1,  # noqa: E731
                                      np.random.default_rng(9), views=[views[i] for i in ids], image_ids=ids,
                                      n_quad=512)
        a, b = run(), run()
        assert [s.records for s in a] == [s.records for s in b]


def make_pairs(o1, d1, o2, d2):
    o1, d1, o2, d2 = (np.atleast_2d(np.asarray(x, float)) for x in (o1, d1, o2, d2))
    d1 = d1 / np.linalg.norm(d1, axis=1, keepdims=True)
    d2 = d2 / np.linalg.norm(d2, axis=1, keepdims=True)
    n = len(o1)
    return PairedRays(o1, d1, o2, d2, np.ones(n), np.zeros((n, 2)), np.ones(n, dtype=int))


def random_pairs(rng, n):
    return make_pairs(rng.normal(size=(n, 3)), rng.normal(size=(n, 3)), rng.normal(size=(n, 3)),
                      rng.normal(size=(n, 3)))


class TestFilter:
    def test_distant_pair_dropped(self):
        # rays cross the z axis 0.5 apart in y, both heading forward
        p = make_pairs([0, 0, 0], [0, 0, 1], [1, 0.5, 0], [-1, 0, 4])
        assert pair_distances(p)[0][0] == pytest.approx(0.5)
        assert len(filter_pairs(p, 0.2)) == 0
        assert len(filter_pairs(p, 0.6)) == 1

    def test_behind_both_cameras_dropped(self):
        # lines meet at z = -2, behind both origins
        p = make_pairs([0, 0, 0], [0, 0, 1], [1, 0, 0], [0.5, 0, 1])
        _, m, n, _ = pair_distances(p)
        assert m[0] < 0 and n[0] < 0
        assert len(filter_pairs(p, 1.0)) == 0

    def test_one_negative_parameter_kept(self):
        # second ray points away from the crossing at (0, 0, 5): m = 5, n = -1
        p = make_pairs([0, 0, 0], [0, 0, 1], [-1, 0, 5], [-1, 0, 0])
        _, m, n, _ = pair_distances(p)
        assert m[0] == pytest.approx(5.0) and n[0] == pytest.approx(-1.0)
        assert len(filter_pairs(p, 1e-6)) == 1

    def test_parallel_dropped(self):
        p = make_pairs([0, 0, 0], [0, 0, 1], [0, 0.01, 0], [0, 0, 1])
        assert len(filter_pairs(p, 1.0)) == 0

    def test_subset_order_idempotent(self):
        rng = np.random.default_rng(5)
        p = random_pairs(rng, 300)
        p.confidences = np.arange(300.0)
        once = filter_pairs(p, 0.5)
        assert 0 < len(once) < 300
        assert np.all(np.diff(once.confidences) > 0)
        twice = filter_pairs(once, 0.5)
        np.testing.assert_array_equal(twice.confidences, once.confidences)

    def test_retention_monotone_in_tau(self):
        p = random_pairs(np.random.default_rng(6), 500)
        prev = np.zeros(500, dtype=bool)
        for tau in (0.01, 0.1, 0.3, 1.0, 3.0):
            keep = filter_keep_mask(p, tau)
            assert np.all(keep[prev])
            prev = keep

    def test_tau_must_be_positive(self):
        with pytest.raises(ValueError):
            filter_pairs(random_pairs(np.random.default_rng(0), 3), 0.0)

    def test_prefilter_agrees_with_online(self, tiny_scene):
        scene, views = tiny_scene
        ids = scene.train_views
        stacks = synthetic_match(scene, [scene.cameras[i] for i in ids], 70, 0.0, 0.3, np.random.default_rng(2),
                                 views=[views[i] for i in ids], image_ids=ids, n_quad=512)
        cams = dict(enumerate(scene.cameras))
        tau = 0.01 * scene.diameter
        for st, pre in zip(stacks, prefilter_stacks(stacks, cams, tau)):
            online = filter_pairs(pairs_from_records(list(st.records.values()), cams), tau)
            assert len(pre) == len(online)
            np.testing.assert_array_equal(np.array(list(pre.records)), online.target_pixels)


class TestSamplePairs:
    @pytest.fixture
    def setup(self, clean_matches):
        scene, _, stacks = clean_matches
        return stacks[0], dict(enumerate(scene.cameras))

    def test_zero(self, setup):
        st, cams = setup
        assert len(sample_pairs(st, 0, cams, np.random.default_rng(0))) == 0

    def test_all_once(self, setup):
        st, cams = setup
        p = sample_pairs(st, len(st) + 10, cams, np.random.default_rng(0))
        assert len(p) == len(st)
        assert {tuple(x) for x in p.target_pixels} == set(st.records)

    def test_seeded(self, setup):
        st, cams = setup
        a = sample_pairs(st, 7, cams, np.random.default_rng(3))
        b = sample_pairs(st, 7, cams, np.random.default_rng(3))
        np.testing.assert_array_equal(a.target_pixels, b.target_pixels)
        np.testing.assert_array_equal(a.ref_dirs, b.ref_dirs)

    def test_rays_match_pixels(self, setup):
        st, cams = setup
        p = sample_pairs(st, 5, cams, np.random.default_rng(1))
        o, d = generate_rays(cams[st.target_image].intrinsics, cams[st.target_image].pose, p.target_pixels)
        np.testing.assert_array_equal(d, p.target_dirs)

    def test_empty_stack(self, setup):
        _, cams = setup
        assert len(sample_pairs(MatchStack(0), 50, cams, np.random.default_rng(0))) == 0
