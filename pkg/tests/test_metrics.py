import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from volseg.errors import ContractError, ShapeError
from volseg.metrics import (COLUMNS, CONVENTIONS, case_metrics, dice, evaluate_cohort, hd95,
                            sensitivity, specificity, surface, volume_diagonal)

from oracles import brute_hd95, brute_surface, confusion, counted_dice

masks = hnp.arrays(bool, (4, 5, 3), elements=st.booleans())


def _random_mask(rng, shape, density):
    return rng.random(shape) < density


def test_dice_examples():
    a = np.zeros((2, 2, 2), bool)
    a[0, 0, :] = True
    assert dice(a, a) == 1.0
    assert dice(np.zeros(3), np.zeros(3)) == 1.0
    b = np.zeros((2, 2, 2), bool)
    b[0, 0, 0] = b[1, 1, 1] = True
    assert dice(a, b) == 0.5
    assert dice(a, np.zeros_like(a)) == 0.0


def test_sensitivity_specificity_examples():
    ref = np.array([1, 1, 0, 0], bool)
    assert (sensitivity(ref, ref), specificity(ref, ref)) == (1.0, 1.0)
    allpos = np.ones(4, bool)
    assert sensitivity(allpos, ref) == 1.0 and specificity(allpos, ref) == 0.0
    assert sensitivity(np.zeros(4), np.zeros(4)) == 1.0


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        dice(np.zeros(3), np.zeros(4))
    with pytest.raises(ShapeError):
        hd95(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


@settings(max_examples=60, deadline=None)
@given(masks, masks)
def test_overlap_metrics_match_counting(p, r):
    tp, fp, fn, tn = confusion(p, r)
    assert dice(p, r) == pytest.approx(counted_dice(p, r), abs=1e-15)
    assert dice(p, r) == dice(r, p)
    assert sensitivity(p, r) == pytest.approx(1.0 if tp + fn == 0 else tp / (tp + fn), abs=1e-15)
    assert specificity(p, r) == pytest.approx(1.0 if tn + fp == 0 else tn / (tn + fp), abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(masks)
def test_surface_matches_neighbor_scan(m):
    np.testing.assert_array_equal(surface(m), brute_surface(m))


def test_hd95_examples():
    a = np.zeros((8, 8, 8), bool)
    b = np.zeros((8, 8, 8), bool)
    a[2, 4, 4] = True
    b[5, 4, 4] = True
    assert hd95(a, b) == 3.0
    assert hd95(a, a) == 0.0
    assert hd95(np.zeros_like(a), np.zeros_like(a)) == 0.0


def test_hd95_one_empty_uses_sentinel():
    a = np.zeros((4, 5, 6), bool)
    a[1, 1, 1] = True
    spacing = (1.0, 2.0, 0.5)
    assert hd95(a, np.zeros_like(a), spacing) == pytest.approx(volume_diagonal(a.shape, spacing))
    assert volume_diagonal((4, 5, 6), spacing) == pytest.approx(np.sqrt(16 + 100 + 9))
    assert hd95(np.zeros_like(a), a, sentinel=373.0) == 373.0


@pytest.mark.parametrize("seed", range(15))
def test_hd95_matches_all_pairs(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(3, 10, size=3))
    p = _random_mask(rng, shape, rng.uniform(0.05, 0.6))
    r = _random_mask(rng, shape, rng.uniform(0.05, 0.6))
    assert hd95(p, r) == brute_hd95(p, r)
    spacing = tuple(rng.uniform(0.5, 2.0, size=3))
    assert hd95(p, r, spacing) == pytest.approx(brute_hd95(p, r, spacing), rel=1e-12)


def test_hd95_symmetric_and_translation_invariant(rng):
    p = np.zeros((12, 12, 12), bool)
    r = np.zeros((12, 12, 12), bool)
    p[2:6, 3:7, 2:5] = True
    r[3:8, 2:6, 3:6] = True
    assert hd95(p, r) == hd95(r, p)
    shifted = hd95(np.roll(p, (3, 2, 4), (0, 1, 2)), np.roll(r, (3, 2, 4), (0, 1, 2)))
    assert shifted == pytest.approx(hd95(p, r), abs=1e-12)


def test_hd95_not_above_exact_hausdorff(rng):
    for _ in range(10):
        p = _random_mask(rng, (6, 6, 6), 0.3)
        r = _random_mask(rng, (6, 6, 6), 0.3)
        a = np.argwhere(brute_surface(p))
        b = np.argwhere(brute_surface(r))
        d = np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1))
        hd = max(d.min(1).max(), d.min(0).max())
        assert hd95(p, r) <= hd + 1e-12


def test_case_metrics_perfect():
    lab = np.zeros((6, 6, 6), np.uint8)
    lab[1:5, 1:5, 1:5] = 2
    lab[2:4, 2:4, 2:4] = 1
    lab[2, 2, 2] = 4
    m = case_metrics(lab, lab)
    for region in ("wt", "tc", "et"):
        assert m.get(region, "dice") == 1.0 and m.get(region, "hd95") == 0.0


def _hand_case(shift):
    ref = np.zeros((8, 8, 8), np.uint8)
    ref[2:6, 2:6, 2:6] = 2
    ref[3:5, 3:5, 3:5] = 4
    pred = np.zeros_like(ref)
    pred[2 + shift:6 + shift, 2:6, 2:6] = 2
    return pred, ref


def test_cohort_matches_hand_computation():
    # case 0 perfect; case 1 whole tumor shifted by one slice, no ET predicted;
    # case 2 both empty
    p0 = r0 = _hand_case(0)[1]
    p1, r1 = _hand_case(1)
    p2 = r2 = np.zeros((8, 8, 8), np.uint8)
    report = evaluate_cohort([p0, p1, p2], [r0, r1, r2], case_ids=["a", "b", "c"])
    # case 1 whole tumor: 4x4x4 cubes overlapping in 3 slices -> 2*48/128
    assert report.cases[1].get("wt", "dice") == pytest.approx(0.75)
    assert report.cases[1].get("et", "dice") == 0.0
    assert report.cases[1].get("et", "hd95") == pytest.approx(np.sqrt(3 * 64))
    assert report.cases[1].get("wt", "hd95") == pytest.approx(brute_hd95(p1 > 0, r1 > 0))
    assert report.cases[2].get("et", "dice") == 1.0 and report.cases[2].get("et", "hd95") == 0.0
    wt = [1.0, 0.75, 1.0]
    assert report.summary["Mean"][("dice", "wt")] == pytest.approx(np.mean(wt))
    assert report.summary["StdDev"][("dice", "wt")] == pytest.approx(np.std(wt))
    assert report.summary["Median"][("dice", "wt")] == 1.0
    assert report.cases[1].get("tc", "sensitivity") == 0.0
    assert report.cases[1].get("wt", "specificity") == pytest.approx((512 - 64 - 16) / (512 - 64))


def test_single_case_summary_collapses():
    p, r = _hand_case(1)
    report = evaluate_cohort([p], [r])
    for col in COLUMNS:
        assert report.summary["Mean"][col] == report.summary["Median"][col]
        assert report.summary["StdDev"][col] == 0.0


def test_report_layout(tmp_path):
    p, r = _hand_case(0)
    report = evaluate_cohort([p], [r], case_ids=["x"])
    report.save(tmp_path / "report.tsv")
    lines = (tmp_path / "report.tsv").read_text().splitlines()
    comments = [l for l in lines if l.startswith("#")]
    assert len(comments) == len(CONVENTIONS)
    header = lines[len(comments)].split("\t")
    assert header[:7] == ["case", "Dice_enh", "Dice_whole", "Dice_core", "HD95_enh", "HD95_whole", "HD95_core"]
    assert [l.split("\t")[0] for l in lines[len(comments) + 1:]] == ["x", "Mean", "StdDev", "Median"]


def test_misaligned_cohort():
    with pytest.raises(ContractError):
        evaluate_cohort([np.zeros((2, 2, 2), np.uint8)], [])
