"""Stage functions behind the command line: simulate, pick, score, sort, reconstruct, report.

Every stage reads and writes a run directory:

    config.txt            resolved configuration (all keys)
    truth.csv             simulated sites
    micrographs/*.mrc
    volumes/truth.mrc, initial.mrc, final.mrc, all.mrc, sorted.mrc
    picks.csv
    scores_round_<k>.csv
    trace.csv, labels.csv, histogram.csv
    fsc.csv, fsc_all.csv
    report.txt

Seeds for each micrograph and for the noise probe derive from ``run.seed``
through :class:`numpy.random.SeedSequence`, and nothing written depends on
the worker count, so re-running a config reproduces every file.
"""

from __future__ import annotations

import contextlib
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .align import (FrequencyBand, OrientationGrid, Patch, read_scores_csv, score_dataset,
                    write_scores_csv)
from .config import RunConfig
from .errors import CryosortError, InvariantError, ParameterError
from .mrcio import read_mrc, write_mrc
from .pick import extract_patches, match_picks, pick_micrograph, read_picks_csv, write_picks_csv
from .reconstruct import compare_sorted_vs_unsorted
from .simulate import Micrograph, SimConfig, read_truth_csv, synthesize_micrograph, write_truth_csv
from .sort import LoopConfig, LoopTrace, refine_sort_loop, sort_scores
from .statmodel import run_narrowing_trace
from .volume import CtfParams, Volume3D, lowpass, make_elongated_phantom, make_phantom

log = logging.getLogger(__name__)


@contextlib.contextmanager
def stage(name: str):
    """Tag any pipeline error escaping the block with the stage name."""
    try:
        yield
    except CryosortError as exc:
        if not hasattr(exc, "stage"):
            exc.stage = name
        raise


def sub_seed(master: int, *path: int) -> int:
    return int(np.random.SeedSequence([master, *path]).generate_state(1)[0])


# ------------------------------------------------------------------ objects from config

def build_volume(cfg: RunConfig) -> Volume3D:
    n, a = cfg["phantom.grid_size"], cfg["phantom.voxel_size"]
    kind = cfg["phantom.kind"]
    if kind == "elongated":
        return make_elongated_phantom(n, a)
    if kind == "spherical":
        return make_phantom(cfg["run.seed"], 1, False, n, a)
    return make_phantom(cfg["run.seed"], cfg["phantom.n_blobs"], True, n, a)


def build_ctf(cfg: RunConfig) -> CtfParams:
    return CtfParams(defocus=cfg["ctf.defocus"], voltage=cfg["ctf.voltage"],
                     spherical_aberration=cfg["ctf.cs"],
                     amplitude_contrast=cfg["ctf.amplitude_contrast"],
                     pixel_size=cfg["phantom.voxel_size"])


def build_grid(cfg: RunConfig) -> OrientationGrid:
    return OrientationGrid.fibonacci(cfg["grid.spacing"], cfg["grid.in_plane_step"],
                                     cfg["grid.max_shift"])


def build_band(cfg: RunConfig) -> FrequencyBand:
    return FrequencyBand(cfg["band.lo"], cfg["band.hi"])


def loop_config(cfg: RunConfig) -> LoopConfig:
    return LoopConfig(max_rounds=cfg["loop.max_rounds"], stability_tol=cfg["loop.stability_tol"],
                      min_separation=cfg["loop.min_separation"],
                      noise_probe=cfg["loop.noise_probe"], seed=sub_seed(cfg["run.seed"], 3),
                      workers=cfg.workers, min_rounds=cfg["loop.min_rounds"])


def sim_config(cfg: RunConfig, index: int) -> SimConfig:
    return SimConfig(n_good=cfg["sim.n_good"], n_junk=cfg["sim.n_junk"], snr=cfg["sim.snr"],
                     min_separation=cfg["sim.min_separation"],
                     contamination_count=cfg["sim.contamination_count"],
                     seed=sub_seed(cfg["run.seed"], 1, index), width=cfg["sim.width"],
                     height=cfg["sim.height"], noise_sigma=cfg["sim.noise_sigma"],
                     max_shift=cfg["sim.max_shift"],
                     contamination_amplitude=cfg["sim.contamination_amplitude"],
                     junk_mode=cfg["sim.junk_mode"])


# ------------------------------------------------------------------ run directory

@dataclass
class RunDirectory:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def micrograph_paths(self) -> list[Path]:
        return sorted((self.root / "micrographs").glob("*.mrc"))

    def scores_path(self, k: int) -> Path:
        return self.path(f"scores_round_{k}.csv")

    def latest_scores(self) -> Path:
        found = sorted(self.root.glob("scores_round_*.csv"),
                       key=lambda p: int(p.stem.rsplit("_", 1)[1]))
        if not found:
            raise ParameterError(f"no scores_round_*.csv in {self.root}")
        return found[-1]

    def require(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        if not p.exists():
            raise ParameterError(f"{p} is missing; run the earlier stage first")
        return p

    def write_config(self, cfg: RunConfig) -> None:
        self.path("config.txt").write_text(cfg.dumps())


def load_micrographs(run: RunDirectory) -> list[Micrograph]:
    out = []
    for p in run.micrograph_paths():
        data, px = read_mrc(p)
        out.append(Micrograph(data, px, p.stem))
    if not out:
        raise ParameterError(f"no micrographs in {run.root / 'micrographs'}")
    return out


# ------------------------------------------------------------------ stages

def cmd_simulate(cfg: RunConfig, run: RunDirectory):
    """Write the truth volume, the initial reference, micrographs and ``truth.csv``."""
    with stage("simulate"):
        run.write_config(cfg)
        vol = build_volume(cfg)
        ctf = build_ctf(cfg)
        write_mrc(run.path("volumes", "truth.mrc"), vol.data, vol.voxel_size)
        init = lowpass(vol, cfg["reference.lowpass"])
        write_mrc(run.path("volumes", "initial.mrc"), init.data, vol.voxel_size)
        mics, particles = [], []
        for i in range(cfg["sim.micrographs"]):
            name = f"mic{i:03d}"
            mic, truth = synthesize_micrograph(vol, ctf, sim_config(cfg, i), name)
            write_mrc(run.path("micrographs", f"{name}.mrc"), mic.data, mic.pixel_size)
            mics.append(mic)
            particles.extend(truth.particles)
        write_truth_csv(run.path("truth.csv"), particles)
    return vol, mics, particles


def cmd_pick(cfg: RunConfig, run: RunDirectory, mics=None, particles=None):
    """Pick every micrograph, or copy the truth sites when ``pick.source = truth``."""
    with stage("pick"):
        mics = mics if mics is not None else load_micrographs(run)
        picks = []
        if cfg["pick.source"] == "truth":
            particles = particles if particles is not None else read_truth_csv(run.require("truth.csv"))
            for p in particles:
                picks.append((p.id.split("/", 1)[0], p.x, p.y))
        else:
            for m in mics:
                ps = pick_micrograph(m, cfg["pick.radius"], cfg["phantom.grid_size"],
                                     cfg["pick.z_cut"], cfg["pick.dilation_radius"],
                                     cfg["pick.min_distance"])
                picks.extend((m.name, int(x), int(y)) for x, y in ps.coords)
        write_picks_csv(run.path("picks.csv"), picks)
    return picks


def extract_all(cfg: RunConfig, mics, picks):
    """Patches and ids for every pick, in ``picks.csv`` order."""
    n = cfg["phantom.grid_size"]
    by_name = {m.name: m for m in mics}
    patches, ids = [], []
    counters: dict[str, int] = {}
    for name, x, y in picks:
        if name not in by_name:
            raise ParameterError(f"pick refers to unknown micrograph {name!r}")
        m = by_name[name]
        data = extract_patches(m, [(x, y)], n)[0]
        k = counters.get(name, 0)
        counters[name] = k + 1
        patches.append(Patch(data, m.pixel_size, (name, x, y)))
        ids.append(f"{name}/p{k}")
    return patches, ids


def pick_truth_labels(cfg: RunConfig, picks, particles) -> np.ndarray:
    """True where a pick matches a good truth site (one-to-one, within ``pick.match_radius``)."""
    out = np.zeros(len(picks), dtype=bool)
    names = sorted({p[0] for p in picks})
    for name in names:
        idx = [i for i, p in enumerate(picks) if p[0] == name]
        good = [(p.x, p.y) for p in particles
                if p.kind == "good" and p.id.split("/", 1)[0] == name]
        assign = match_picks([picks[i][1:] for i in idx], good, cfg["pick.match_radius"])
        out[np.array(idx)[assign >= 0]] = True
    return out


def write_labels_csv(path, records, labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["particle_id", "label", "score"])
        for r, lab in zip(records, labels):
            w.writerow([r.particle_id, int(bool(lab)), "nan" if r.failed else f"{r.score:.10g}"])


def read_labels_csv(path) -> tuple[list[str], np.ndarray]:
    ids, labels = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["particle_id"])
            labels.append(row["label"] == "1")
    return ids, np.array(labels, dtype=bool)


def write_histogram_csv(path, scores, bins: int) -> None:
    s = np.asarray(scores, dtype=np.float64)
    s = s[np.isfinite(s)]
    counts, edges = np.histogram(s, bins=bins)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_left", "count"])
        for left, c in zip(edges[:-1], counts):
            w.writerow([f"{left:.10g}", int(c)])


def load_reference(run: RunDirectory, path=None) -> Volume3D:
    data, px = read_mrc(path or run.require("volumes", "initial.mrc"))
    return Volume3D(data, px)


def cmd_score(cfg: RunConfig, run: RunDirectory, reference=None):
    """Score every pick against one reference and write ``scores_round_1.csv``."""
    with stage("extract"):
        picks = read_picks_csv(run.require("picks.csv"))
        patches, ids = extract_all(cfg, load_micrographs(run), picks)
    with stage("score"):
        ref = load_reference(run, reference)
        records = score_dataset(patches, ref, build_ctf(cfg), build_grid(cfg), build_band(cfg),
                                iteration=1, ids=ids, workers=cfg.workers)
        write_scores_csv(run.scores_path(1), records)
    return records


def cmd_sort(cfg: RunConfig, run: RunDirectory, scores=None):
    """Threshold a scores file; writes ``labels.csv`` and ``histogram.csv``."""
    with stage("sort"):
        records = read_scores_csv(scores or run.latest_scores())
        result = sort_scores(records, cfg["loop.min_separation"])
        write_labels_csv(run.path("labels.csv"), records, result.labels)
        write_histogram_csv(run.path("histogram.csv"), [r.score for r in records],
                            cfg["report.bins"])
    return records, result


def cmd_reconstruct(cfg: RunConfig, run: RunDirectory, records=None, labels=None,
                    patches=None, truth: Volume3D | None = None):
    """Reconstruct from every particle and from the retained ones; write maps and FSCs."""
    if patches is None:
        with stage("extract"):
            picks = read_picks_csv(run.require("picks.csv"))
            patches, _ = extract_all(cfg, load_micrographs(run), picks)
    with stage("reconstruct"):
        if records is None:
            records = read_scores_csv(run.latest_scores())
        if labels is None:
            _, labels = read_labels_csv(run.require("labels.csv"))
        if len(records) != len(patches) or len(labels) != len(patches):
            raise ParameterError("scores, labels and picks differ in length")
        if truth is None and (run.root / "volumes" / "truth.mrc").exists():
            data, px = read_mrc(run.root / "volumes" / "truth.mrc")
            truth = Volume3D(data, px)
        cmp = compare_sorted_vs_unsorted(patches, records, labels, build_ctf(cfg), truth,
                                         cfg["phantom.grid_size"], cfg["phantom.voxel_size"])
        cmp.fsc_sorted.to_csv(run.path("fsc.csv"))
        cmp.fsc_all.to_csv(run.path("fsc_all.csv"))
        px = cfg["phantom.voxel_size"]
        write_mrc(run.path("volumes", "all.mrc"), cmp.volume_all.data, px)
        write_mrc(run.path("volumes", "sorted.mrc"), cmp.volume_sorted.data, px)
    return cmp


# ------------------------------------------------------------------ report

@dataclass
class Check:
    name: str
    passed: bool | None  # None = not applicable
    detail: str = ""

    def line(self) -> str:
        tag = "N/A " if self.passed is None else ("PASS" if self.passed else "FAIL")
        return f"  {tag} {self.name}" + (f"  ({self.detail})" if self.detail else "")


@dataclass
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int
    flags: list[str] = field(default_factory=list)

    @classmethod
    def from_labels(cls, predicted, actual) -> "Confusion":
        p, a = np.asarray(predicted, bool), np.asarray(actual, bool)
        return cls(int(np.sum(p & a)), int(np.sum(p & ~a)), int(np.sum(~p & a)),
                   int(np.sum(~p & ~a)))

    @property
    def precision(self) -> float:
        if self.fp + self.tn == 0:
            # No negatives exist, so nothing can be a false positive.
            if "no_negatives" not in self.flags:
                self.flags.append("no_negatives")
            return 1.0
        kept = self.tp + self.fp
        return self.tp / kept if kept else 0.0

    @property
    def recall(self) -> float:
        pos = self.tp + self.fn
        return self.tp / pos if pos else 1.0


def loop_checks(trace: LoopTrace, cfg: RunConfig) -> list[Check]:
    counts = trace.retained
    tol = cfg["loop.stability_tol"]
    drops = [i + 2 for i in range(len(counts) - 1)
             if counts[i + 1] < counts[i] * (1 - tol)]
    stopped = len(counts) >= 2 and abs(counts[-1] - counts[-2]) / max(counts[-2], 1) < tol
    out = [
        Check("retained count non-decreasing across rounds", not drops,
              f"drop at round {drops[0]}" if drops else " -> ".join(map(str, counts))),
        Check(f"stability stop within {cfg['loop.max_rounds']} rounds", stopped,
              f"{len(counts)} rounds"),
    ]
    if len(trace) >= 3:
        v = run_narrowing_trace(trace)
        out.append(Check("good-peak std narrows (10% band)", v.passed,
                         f"fails at round {v.offending_round}" if not v.passed else
                         " -> ".join(f"{s:.4f}" for s in v.stds)))
    else:
        out.append(Check("good-peak std narrows (10% band)", None, "fewer than 3 rounds"))
    return out


def build_report(cfg: RunConfig, n_truth: int, n_good_truth: int, picks, pick_is_good,
                 trace: LoopTrace, labels, cmp) -> tuple[list[str], list[Check]]:
    conf = Confusion.from_labels(labels, pick_is_good)
    precision, recall = conf.precision, conf.recall
    final = trace.rounds[-1]
    lines = [
        "cryosort pipeline report",
        f"micrographs: {cfg['sim.micrographs']}  truth sites: {n_truth} "
        f"(good {n_good_truth}, junk {n_truth - n_good_truth})",
        f"picks: {len(picks)}  matched to good sites: {int(np.sum(pick_is_good))}",
        f"rounds: {len(trace)}  retained per round: {' '.join(map(str, trace.retained))}",
        f"final threshold: {final.threshold:.6f}",
        f"confusion vs truth: TP {conf.tp}  FP {conf.fp}  FN {conf.fn}  TN {conf.tn}",
        f"precision: {precision:.4f}  recall: {recall:.4f}"
        + (f"  [flags: {', '.join(conf.flags)}]" if conf.flags else ""),
        *cmp.lines(),
    ]
    checks = [
        Check(f"precision >= {cfg['report.min_precision']}",
              precision >= cfg["report.min_precision"], f"{precision:.4f}"),
        Check(f"recall >= {cfg['report.min_recall']}",
              recall >= cfg["report.min_recall"], f"{recall:.4f}"),
        *loop_checks(trace, cfg),
        Check("sorted resolution finer than or equal to all-particle resolution",
              cmp.resolution_sorted >= cmp.resolution_all,
              f"{cmp.resolution_sorted:.5f} vs {cmp.resolution_all:.5f} 1/A"),
    ]
    lines.append("invariants:")
    lines.extend(c.line() for c in checks)
    return lines, checks


def cmd_pipeline(cfg: RunConfig, run: RunDirectory) -> list[Check]:
    """Simulate, pick, run the refine-sort loop, reconstruct and report.

    Raises :class:`InvariantError` after writing the report when any
    report invariant fails.
    """
    vol, mics, particles = cmd_simulate(cfg, run)
    picks = cmd_pick(cfg, run, mics, particles)
    with stage("extract"):
        patches, ids = extract_all(cfg, mics, picks)
    ctf = build_ctf(cfg)
    init = lowpass(vol, cfg["reference.lowpass"])

    def on_round(k, records, result):
        write_scores_csv(run.scores_path(k), records)

    with stage("sort"):
        final_ref, result, trace = refine_sort_loop(
            patches, init, ctf, build_grid(cfg), build_band(cfg), loop_config(cfg), ids, on_round)
        write_mrc(run.path("volumes", "final.mrc"), final_ref.data, final_ref.voxel_size)
        trace.to_csv(run.path("trace.csv"))
        records = trace.records[-1]
        write_labels_csv(run.path("labels.csv"), records, result.labels)
        write_histogram_csv(run.path("histogram.csv"), [r.score for r in records],
                            cfg["report.bins"])
    cmp = cmd_reconstruct(cfg, run, records, result.labels, patches, vol)
    with stage("report"):
        is_good = pick_truth_labels(cfg, picks, particles)
        n_good = sum(p.kind == "good" for p in particles)
        lines, checks = build_report(cfg, len(particles), n_good, picks, is_good, trace,
                                     result.labels, cmp)
        run.path("report.txt").write_text("\n".join(lines) + "\n")
        failed = [c.name for c in checks if c.passed is False]
        if failed:
            raise InvariantError("report invariant failed: " + "; ".join(failed))
    return checks



# ------------------------------------------------------------------ verify

DELTA1_LEVELS = (0.0, 0.1, 0.2, 0.4)
DELTA2_LEVELS = (0.0, 0.2, 0.4)
SWEEP_SEEDS = 3


def cmd_verify(cfg: RunConfig, run: RunDirectory | None = None) -> list[Check]:
    """Monte-Carlo checks of the score model; writes ``verify.csv`` when ``run`` is given."""
    from .statmodel import (ALLOWED_N, SweepConfig, run_chi_square_concentration, run_noise_law,
                            run_perturbation_sweep)

    n, trials, seed = cfg["verify.n"], cfg["verify.trials"], cfg["run.seed"]
    with stage("verify"):
        noise = run_noise_law(n, trials, seed)
        other = n // 2 if n == ALLOWED_N[-1] else n * 2
        noise2 = run_noise_law(other, trials, seed)
        chi = run_chi_square_concentration(n, trials, seed)
        coarse, fine = (noise, noise2) if n < other else (noise2, noise)
        quarter = coarse.variance / fine.variance / 4 - 1
        checks = [
            Check(f"noise-score variance = 1/N^2 within 5% (N={n})", abs(noise.relative_error) <= 0.05,
                  f"{noise.variance:.4e} vs {noise.predicted_variance:.4e}"),
            Check("noise-score mean within 3/(N sqrt(trials)) of 0",
                  abs(noise.mean) <= noise.mean_tolerance,
                  f"{noise.mean:.2e}, tolerance {noise.mean_tolerance:.2e}"),
            Check(f"doubling N quarters the variance within 10% (N={min(n, other)} vs {max(n, other)})",
                  abs(quarter) <= 0.10, f"ratio/4 - 1 = {quarter:+.3f}"),
            Check("mean of ||eps||/(sigma N) in [0.999, 1.001]", 0.999 <= chi.mean <= 1.001,
                  f"{chi.mean:.5f}"),
            Check("std of ||eps||/(sigma N) = 1/(N sqrt 2) within 5%",
                  abs(chi.std / chi.predicted_std - 1) <= 0.05,
                  f"{chi.std:.5f} vs {chi.predicted_std:.5f}"),
        ]

        ctf = build_ctf(cfg)
        band = build_band(cfg)
        m, a = cfg["phantom.grid_size"], cfg["phantom.voxel_size"]
        k = cfg["verify.sweep_particles"]
        asym = make_phantom(seed, cfg["phantom.n_blobs"], True, m, a)
        curves = []
        for s in range(SWEEP_SEEDS):
            sc = SweepConfig(k, k, cfg["sim.snr"], sub_seed(seed, 4, s), band, ctf)
            curves.append([e.good_var for e in run_perturbation_sweep(asym, DELTA1_LEVELS, [0.0], sc)])
        rising = [sum(c[i + 1] >= c[i] for c in curves) for i in range(len(DELTA1_LEVELS) - 1)]
        checks.append(Check("good-peak variance non-decreasing in delta1 (majority of seeds)",
                            all(r * 2 > SWEEP_SEEDS for r in rising),
                            "seeds rising per step: " + " ".join(map(str, rising))))
        sc = SweepConfig(k, k, cfg["sim.snr"], sub_seed(seed, 5), band, ctf)
        grid = run_perturbation_sweep(asym, DELTA1_LEVELS, DELTA2_LEVELS, sc)
        base = next(e for e in grid if e.delta1 == 0 and e.delta2 == 0)
        checks.append(Check("(delta1, delta2) = (0, 0) has the smallest good-peak variance",
                            all(base.good_var <= e.good_var for e in grid),
                            f"{base.good_var:.3e} vs min {min(e.good_var for e in grid):.3e}"))
        sph = run_perturbation_sweep(make_phantom(seed, 1, False, m, a), [0.0], [0.0], sc)[0]
        elo = run_perturbation_sweep(make_elongated_phantom(m, a), [0.0], [0.0], sc)[0]
        checks.append(Check("spherical phantom: good/noise std ratio in [0.5, 2]",
                            0.5 <= sph.width_ratio <= 2, f"{sph.width_ratio:.3f}"))
        checks.append(Check("elongated phantom: good std > noise std", elo.width_ratio > 1,
                            f"{elo.width_ratio:.3f}"))
    if run is not None:
        with open(run.path("verify.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["check", "passed", "detail"])
            for c in checks:
                w.writerow([c.name, "" if c.passed is None else int(c.passed), c.detail])
    return checks
