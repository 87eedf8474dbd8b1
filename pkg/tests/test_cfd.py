import numpy as np
import pytest

from cflab import cfd, ppm
from cflab.errors import EmptyMaskError, MetricError


def mask_from(rows):
    return np.array(rows, dtype=np.uint8)


class StubEmbedder:
    """Returns prescribed unit vectors keyed by a region's pixel set."""

    def __init__(self, table):
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}

    def embed(self, image, region):
        key = tuple(map(tuple, np.argwhere(np.asarray(region).astype(bool))))
        return self.table[key]


def region_key(mask):
    return tuple(map(tuple, np.argwhere(np.asarray(mask).astype(bool))))


class TestClassify:
    def test_exact_mask_is_nested(self):
        m = np.zeros((8, 8), dtype=np.uint8)
        m[2:5, 2:5] = 1
        tax = cfd.classify_masks([m.copy()], m)
        assert len(tax.nested) == 1 and not tax.overlapping and not tax.ignored

    def test_disjoint_is_ignored(self):
        m = np.zeros((8, 8), dtype=np.uint8)
        m[0:2, 0:2] = 1
        seg = np.zeros_like(m)
        seg[5:7, 5:7] = 1
        tax = cfd.classify_masks([seg], m)
        assert len(tax.ignored) == 1 and not tax.nested and not tax.overlapping

    def test_crossing_is_overlapping(self):
        m = np.zeros((8, 8), dtype=np.uint8)
        m[2:6, 2:6] = 1
        seg = np.zeros_like(m)
        seg[4:8, 4:8] = 1
        tax = cfd.classify_masks([seg], m)
        assert len(tax.overlapping) == 1

    def test_matches_loop_oracle_on_random_masks(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            m = (rng.random((12, 12)) < 0.3).astype(np.uint8)
            if not m.any():
                m[6, 6] = 1
            segs = [(rng.random((12, 12)) < 0.25).astype(np.uint8) for _ in range(5)]
            segs = [s for s in segs if s.any()]
            tax = cfd.classify_masks(segs, m)
            n_nested = n_over = n_ign = 0
            for s in segs:
                inter = outside = False
                for y in range(12):
                    for x in range(12):
                        if s[y, x] and m[y, x]:
                            inter = True
                        if s[y, x] and not m[y, x]:
                            outside = True
                if not inter:
                    n_ign += 1
                elif outside:
                    n_over += 1
                else:
                    n_nested += 1
            assert (len(tax.nested), len(tax.overlapping), len(tax.ignored)) == (
                n_nested,
                n_over,
                n_ign,
            )

    def test_empty_edit_mask_raises(self):
        with pytest.raises(EmptyMaskError):
            cfd.classify_masks([], np.zeros((4, 4), dtype=np.uint8))


class TestAdjacent:
    def test_touching_four_neighbors(self):
        a = mask_from([[1, 0], [0, 0]])
        b = mask_from([[0, 1], [0, 0]])
        assert cfd.adjacent(a, b)

    def test_two_pixel_gap_not_adjacent(self):
        a = np.zeros((5, 5), dtype=np.uint8)
        b = np.zeros((5, 5), dtype=np.uint8)
        a[2, 0] = 1
        b[2, 3] = 1
        assert not cfd.adjacent(a, b)

    def test_diagonal_contact_counts(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        a[1, 1] = 1
        b[2, 2] = 1
        assert cfd.adjacent(a, b)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = (rng.random((10, 10)) < 0.2).astype(np.uint8)
            b = (rng.random((10, 10)) < 0.2).astype(np.uint8)
            assert cfd.adjacent(a, b) == cfd.adjacent(b, a)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            a = (rng.random((10, 10)) < 0.15).astype(np.uint8)
            b = (rng.random((10, 10)) < 0.15).astype(np.uint8)
            expect = False
            ya, xa = np.nonzero(a)
            yb, xb = np.nonzero(b)
            for i in range(len(ya)):
                for j in range(len(yb)):
                    if max(abs(int(ya[i]) - int(yb[j])), abs(int(xa[i]) - int(xb[j]))) <= 1:
                        expect = True
            assert cfd.adjacent(a, b) == expect


class TestPairMerge:
    def test_union_of_adjacent_overlapping(self):
        m = np.zeros((10, 10), dtype=np.uint8)
        m[3:7, 3:7] = 1
        nested = np.zeros_like(m)
        nested[4:6, 4:6] = 1
        over1 = np.zeros_like(m)
        over1[2:5, 2:5] = 1  # adjacent to nested
        over2 = np.zeros_like(m)
        over2[5:9, 5:9] = 1  # adjacent to nested
        tax = cfd.classify_masks([nested, over1, over2], m)
        pairs = cfd.pair_merge(tax)
        assert len(pairs) == 1
        merged = pairs[0][1].astype(bool)
        assert np.array_equal(merged, over1.astype(bool) | over2.astype(bool))

    def test_fallback_to_bbox_ring(self):
        m = np.zeros((10, 10), dtype=np.uint8)
        m[2:8, 2:8] = 1
        nested = np.zeros_like(m)
        nested[4:6, 4:6] = 1
        tax = cfd.classify_masks([nested], m)
        pairs = cfd.pair_merge(tax)
        assert len(pairs) == 1
        ring = pairs[0][1].astype(bool)
        # ring is the bbox of m minus m itself (bbox == m here, so dilated)
        assert not (ring & m.astype(bool)).any()
        assert ring.any()

    def test_matches_brute_force_layouts(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            m = np.zeros((12, 12), dtype=np.uint8)
            m[3:9, 3:9] = 1
            segs = []
            for _k in range(6):
                s = np.zeros_like(m)
                cy, cx = rng.integers(0, 12, size=2)
                ry, rx = rng.integers(1, 4, size=2)
                s[max(0, cy - ry) : cy + ry, max(0, cx - rx) : cx + rx] = 1
                if s.any():
                    segs.append(s)
            tax = cfd.classify_masks(segs, m)
            pairs = cfd.pair_merge(tax)
            assert len(pairs) == len(tax.nested)
            for nested, merged in pairs:
                expect = np.zeros_like(m, dtype=bool)
                hit = False
                for over in tax.overlapping:
                    ya, xa = np.nonzero(nested)
                    yb, xb = np.nonzero(over)
                    adj = any(
                        max(abs(int(p) - int(q)), abs(int(r) - int(s_))) <= 1
                        for p, r in zip(ya, xa)
                        for q, s_ in zip(yb, xb)
                    )
                    if adj:
                        expect |= over.astype(bool)
                        hit = True
                if hit:
                    assert np.array_equal(merged.astype(bool), expect)


class TestHallucinationPenalty:
    def test_empty_pairs_score_zero(self):
        penalty, records, renorm = cfd.hallucination_penalty([], cfd.HistogramEmbedder(), np.zeros((4, 4, 3)))
        assert penalty == 0.0 and records == [] and renorm == 0.0

    def test_identical_feature_scores_zero(self):
        img = np.full((6, 6, 3), 0.5)
        nested = np.zeros((6, 6), dtype=np.uint8)
        nested[2:4, 2:4] = 1
        neighbor = np.zeros((6, 6), dtype=np.uint8)
        neighbor[0:2, 0:2] = 1
        penalty, _, _ = cfd.hallucination_penalty(
            [(nested, neighbor)], cfd.HistogramEmbedder(), img
        )
        assert penalty == pytest.approx(0.0, abs=1e-12)

    def test_weighted_two_pair_example(self):
        # areas 3 and 1; similarities 0.5 and 0.9 -> 0.75*0.5 + 0.25*0.1 = 0.4
        n1 = np.zeros((6, 6), dtype=np.uint8)
        n1[0, 0:3] = 1
        n2 = np.zeros((6, 6), dtype=np.uint8)
        n2[5, 5] = 1
        b1 = np.zeros((6, 6), dtype=np.uint8)
        b1[3, 0] = 1
        b2 = np.zeros((6, 6), dtype=np.uint8)
        b2[3, 5] = 1
        s = np.sqrt
        table = {
            region_key(n1): [1.0, 0.0],
            region_key(b1): [0.5, s(0.75)],
            region_key(n2): [0.0, 1.0],
            region_key(b2): [s(1 - 0.9**2), 0.9],
        }
        penalty, records, renorm = cfd.hallucination_penalty(
            [(n1, b1), (n2, b2)], StubEmbedder(table), np.zeros((6, 6, 3))
        )
        assert penalty == pytest.approx(0.4)
        assert renorm == pytest.approx(0.4)
        assert [r["weight"] for r in records] == pytest.approx([0.75, 0.25])


class TestContextCoherence:
    def test_matching_fill_is_near_zero(self):
        rng = np.random.default_rng(4)
        img = np.empty((16, 16, 3))
        img[:] = rng.uniform(0.4, 0.6, size=3)
        m = np.zeros((16, 16), dtype=np.uint8)
        m[5:10, 5:10] = 1
        assert cfd.context_coherence(img, m, cfd.HistogramEmbedder()) <= 0.02

    def test_orthogonal_features_score_one(self):
        m = np.zeros((6, 6), dtype=np.uint8)
        m[2:4, 2:4] = 1
        ring = cfd._context_ring(m)
        table = {region_key(m): [1.0, 0.0], region_key(ring): [0.0, 1.0]}
        got = cfd.context_coherence(np.zeros((6, 6, 3)), m, StubEmbedder(table))
        assert got == pytest.approx(1.0)

    def test_mask_filling_bbox_falls_back_to_dilation(self):
        m = np.ones((6, 6), dtype=np.uint8)
        m[5, 5] = 0  # bbox is the whole image; ring = that one pixel
        img = np.full((6, 6, 3), 0.5)
        assert cfd.context_coherence(img, m, cfd.HistogramEmbedder()) == pytest.approx(0.0, abs=1e-9)

    def test_mask_filling_image_errors(self):
        with pytest.raises(MetricError):
            cfd.context_coherence(np.zeros((4, 4, 3)), np.ones((4, 4), np.uint8), cfd.HistogramEmbedder())


def clean_and_hallucinated(seed):
    """A flat scene, its clean fill, and the same fill with an alien blob."""
    rng = np.random.default_rng(seed)
    bg = rng.uniform(0.3, 0.8, size=3)
    img = np.empty((24, 24, 3))
    img[:] = bg
    m = np.zeros((24, 24), dtype=np.uint8)
    m[8:17, 8:17] = 1
    clean = img.copy()
    hall = img.copy()
    blob_color = (bg + 0.45) % 1.0
    yy, xx = np.mgrid[0:24, 0:24]
    blob = (yy - 12) ** 2 + (xx - 12) ** 2 <= 9
    hall[blob] = blob_color
    return m, clean, hall


class TestCfdScore:
    def test_clean_fill_has_no_penalty(self):
        m, clean, _ = clean_and_hallucinated(0)
        report = cfd.cfd_score(m, clean)
        assert report.d_hallucination == 0.0
        assert report.cfd == report.d_context
        assert report.n_nested == 0

    def test_alien_blob_scores_worse(self):
        m, clean, hall = clean_and_hallucinated(1)
        r_clean = cfd.cfd_score(m, clean)
        r_hall = cfd.cfd_score(m, hall)
        assert r_hall.n_nested >= 1
        assert r_hall.cfd > r_clean.cfd

    def test_decomposition_and_ranges(self):
        m, _, hall = clean_and_hallucinated(2)
        r = cfd.cfd_score(m, hall)
        assert r.cfd == r.d_context + r.d_hallucination
        assert 0.0 <= r.d_context <= 2.0
        assert 0.0 <= r.d_hallucination <= 2.0
        if r.pairs:
            assert sum(p["weight"] for p in r.pairs) <= 1.0 + 1e-12

    def test_weights_sum_to_one_when_nested_present(self):
        m, _, hall = clean_and_hallucinated(3)
        r = cfd.cfd_score(m, hall)
        assert r.pairs
        assert sum(p["weight"] for p in r.pairs) == pytest.approx(1.0)

    def test_ordering_holds_for_both_embedders(self):
        for embedder in (cfd.HistogramEmbedder(), cfd.MomentEmbedder()):
            wins = 0
            for seed in range(10):
                m, clean, hall = clean_and_hallucinated(seed)
                if cfd.cfd_score(m, hall, embedder=embedder).cfd > cfd.cfd_score(
                    m, clean, embedder=embedder
                ).cfd:
                    wins += 1
            assert wins >= 9

    def test_deterministic(self):
        m, _, hall = clean_and_hallucinated(4)
        assert cfd.cfd_score(m, hall).cfd == cfd.cfd_score(m, hall).cfd


class TestBackends:
    def test_color_component_segmenter_finds_blob(self):
        img = np.full((16, 16, 3), 0.2)
        img[4:10, 4:10] = [0.9, 0.1, 0.1]
        segs = cfd.ColorComponentSegmenter().segment(img)
        assert len(segs) == 2
        areas = sorted(int(s.sum()) for s in segs)
        assert areas == [36, 256 - 36]

    def test_min_area_filter(self):
        img = np.full((16, 16, 3), 0.2)
        img[0, 0] = [0.9, 0.9, 0.9]  # single alien pixel, below min area
        segs = cfd.ColorComponentSegmenter(min_area=9).segment(img)
        assert len(segs) == 1

    def test_components_are_four_connected(self):
        img = np.full((8, 8, 3), 0.2)
        img[1, 1] = img[2, 2] = [0.9, 0.1, 0.1]  # diagonal pixels split
        segs = cfd.ColorComponentSegmenter(min_area=1).segment(img)
        red = [s for s in segs if s.sum() == 1]
        assert len(red) == 2

    def test_embedders_unit_norm_and_deterministic(self):
        rng = np.random.default_rng(5)
        img = rng.uniform(size=(12, 12, 3))
        region = np.zeros((12, 12), dtype=np.uint8)
        region[3:9, 2:7] = 1
        for embedder in (cfd.HistogramEmbedder(), cfd.MomentEmbedder()):
            f1 = embedder.embed(img, region)
            f2 = embedder.embed(img, region)
            assert np.linalg.norm(f1) == pytest.approx(1.0)
            assert np.array_equal(f1, f2)

    def test_precomputed_segmenter_reads_masks(self, tmp_path):
        seg_dir = tmp_path / "segs"
        seg_dir.mkdir()
        a = np.zeros((8, 8), dtype=np.uint8)
        a[0:3, 0:3] = 1
        b = np.zeros((8, 8), dtype=np.uint8)
        b[5:8, 5:8] = 1
        ppm.write_pgm(seg_dir / "000.pgm", a)
        ppm.write_pgm(seg_dir / "001.pgm", b)
        segs = cfd.PrecomputedSegmenter(seg_dir).segment(np.zeros((8, 8, 3)))
        assert len(segs) == 2
        assert np.array_equal(segs[0], a)
        assert np.array_equal(segs[1], b)
