"""Command-line front end: ``multimix {spiral,variance,mix-preview,calib} [key=value ...]``.

Options come from built-in defaults, then an optional config file (``key = value``
lines, ``#`` comments), then ``key=value`` arguments. Unknown keys are usage errors.
Exit codes: 0 ok, 1 runtime failure, 2 usage error, 3 exact-mode tolerance breach.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_TOLERANCE = 0, 1, 2, 3
TOL = 1e-10


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        vals = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise UsageError("empty integer list")
    return vals


def _str_list(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _bool(text):
    t = str(text).lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


_SPIRAL_DATA = {
    "n": (1000, int), "noise": (0.06, float), "flip_frac": (0.2, float), "train_frac": (0.4, float),
    "r_max": (1.0, float), "theta_max": (1.5 * math.pi, float),
}

OPTIONS = {
    "spiral": {
        **_SPIRAL_DATA,
        "seeds": (5, int), "k": (5, int), "alpha": (1.0, float), "layers": ("1,2", _int_list),
        "epochs": (3000, int), "batch_size": (256, int), "lr": (0.01, float), "l2": (1e-4, float),
        "hidden_layers": (8, int), "width": (6, int), "resolution": (200, int), "workers": (1, int),
    },
    "variance": {
        "mode": ("exact", str), "problem": ("canonical", str), "ks": ("1,2,4,8", _int_list),
        "bs": ("1,2", _int_list), "b0_k": (2, int), "b0_bs": ("1,2,4,8,16,32,64,128,256", _int_list),
        "cross_check": ("auto", str), "shared": (True, _bool), "replicates": (2000, int),
        "bootstrap": (1000, int),
    },
    "mix-preview": {
        "a": ("", str), "b": ("", str), "mixers": ("input,cut,puzzle", _str_list), "k": (4, int),
        "alpha": (1.0, float), "d": (2, int), "grid": ("4,4", _int_list),
    },
    "calib": {
        **_SPIRAL_DATA,
        "checkpoint": ("", str), "split": ("test", str), "m": (10, int),
    },
}


def read_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve(command: str, file_values: dict, cli_values: dict) -> dict:
    spec = OPTIONS[command]
    raw = {}
    for source in (file_values, cli_values):
        for key, value in source.items():
            if key not in spec:
                raise UsageError(f"unknown option {key!r} for {command}; known: {', '.join(sorted(spec))}")
            raw[key] = value
    cfg = {}
    for key, (default, conv) in spec.items():
        value = raw.get(key, default)
        try:
            cfg[key] = conv(value)
        except (TypeError, ValueError):
            raise UsageError(f"bad value for {key}: {value!r}") from None
    return cfg


def _spiral_cfg(cfg):
    from multimix.experiments import SpiralConfig
    return SpiralConfig(**{k: cfg[k] for k in _SPIRAL_DATA})


# ------------------------------------------------------------------ spiral


def cmd_spiral(cfg, seed, out: Path, manifest) -> int:
    from multimix.experiments import (RunConfig, export_boundary, gen_spiral, data_rng, ordering_holds,
                                      spiral_study, study_medians, study_variants)
    from multimix.persist import write_csv
    from multimix.tinynet import save_checkpoint

    if cfg["seeds"] < 1 or cfg["k"] < 2:
        raise UsageError("need seeds >= 1 and k >= 2")
    base = RunConfig(alpha=cfg["alpha"], layers=tuple(cfg["layers"]), epochs=cfg["epochs"],
                     batch_size=cfg["batch_size"], lr=cfg["lr"], l2=cfg["l2"],
                     hidden_layers=cfg["hidden_layers"], width=cfg["width"])
    seeds = list(range(seed, seed + cfg["seeds"]))
    spiral = _spiral_cfg(cfg)
    t0 = time.perf_counter()
    results = spiral_study(spiral, base, seeds, cfg["k"], cfg["workers"])
    manifest.time("training", time.perf_counter() - t0)

    for (name, s), res in results.items():
        rows = []
        for m in res.history:
            rows.append((m.epoch, "train", m.train_error, m.train_loss, m.mean_sq_gradnorm))
            rows.append((m.epoch, "test", m.test_error, m.test_loss, m.mean_sq_gradnorm))
        write_csv(out / f"metrics_{name}_seed{s}.csv",
                  ["epoch", "split", "error", "loss", "mean_sq_gradnorm"], rows)
        save_checkpoint(res.net, out / f"model_{name}_seed{s}.mlp")
    data = gen_spiral(data_rng(seeds[0]), spiral)
    for name, _, _ in study_variants(cfg["k"]):
        export_boundary(results[name, seeds[0]].net, data, cfg["resolution"],
                        out / f"boundary_{name}.csv", out / f"boundary_{name}.ppm")

    write_csv(out / "accuracy_per_seed.csv", ["variant", "seed", "test_accuracy"],
              [(name, s, res.test_accuracy) for (name, s), res in results.items()])
    medians = study_medians(results, cfg["k"])
    ordered = ordering_holds(medians, cfg["k"])
    header = ["variant", "mixer", "k", "median_accuracy"] + [f"seed{s}" for s in seeds] + ["ordering_ok"]
    rows = []
    for name, mixer, k in study_variants(cfg["k"]):
        rows.append([name, mixer, k, medians[name]] + [results[name, s].test_accuracy for s in seeds]
                    + [ordered])
    write_csv(out / "summary.csv", header, rows)
    for name in medians:
        print(f"{name:14s} median test accuracy {medians[name]:.2f}%")
    print(f"ordering multi-mix >= K=1 >= none: {'yes' if ordered else 'no'}")
    return EXIT_OK


# ---------------------------------------------------------------- variance


def _variance_problem(name):
    from multimix.variance_lab import canonical_problem, engineered_problem
    if name == "canonical":
        return canonical_problem()
    if name == "engineered":
        return engineered_problem()
    raise UsageError(f"unknown problem {name!r} (canonical or engineered)")


def cmd_variance(cfg, seed, out: Path, manifest) -> int:
    from multimix.persist import write_csv
    from multimix.rand_dist import Rng
    from multimix.variance_lab import (EnumerationBudgetError, SamplerConfig, check_batch_threshold,
                                       decompose, enumerate_estimator, estimate_variance,
                                       exact_variance, grad_table, pair_probs)

    if cfg["mode"] not in ("exact", "mc"):
        raise UsageError("mode must be exact or mc")
    if cfg["cross_check"] not in ("auto", "force", "off"):
        raise UsageError("cross_check must be auto, force or off")
    if min(cfg["ks"]) < 1 or min(cfg["bs"]) < 1 or cfg["b0_k"] < 2:
        raise UsageError("K and B values must be >= 1 and b0_k >= 2")
    problem, dist = _variance_problem(cfg["problem"])
    table = grad_table(problem, dist)
    d = decompose(table, pair_probs(problem.n_pairs), dist.probs)
    breaches = []

    rows = []
    rng = Rng(seed)
    for est in ("multimix", "largebatch"):
        for k in cfg["ks"]:
            for b in cfg["bs"]:
                shared = cfg["shared"] or est == "largebatch"
                ev = exact_variance(problem, dist, k, b, est, shared, cross_check=False, table=table)
                enum = None
                if cfg["cross_check"] != "off":
                    try:
                        enum = enumerate_estimator(table, pair_probs(problem.n_pairs), dist.probs, k, b,
                                                   est, shared).var
                    except EnumerationBudgetError:
                        if cfg["cross_check"] == "force":
                            raise
                gap = None if enum is None else abs(enum - ev.closed_form)
                if gap is not None and gap > TOL:
                    breaches.append(f"{est} K={k} B={b}: closed form vs enumeration gap {gap:.3g}")
                if cfg["mode"] == "exact":
                    rows.append((est, k, b, ev.closed_form, None, None, ev.closed_form, enum, gap))
                else:
                    sc = SamplerConfig(problem, k, b, est, dist=dist, shared=shared)
                    rep = estimate_variance(sc, cfg["replicates"], rng.substream(len(rows)), cfg["bootstrap"])
                    rows.append((est, k, b, rep.var, rep.ci_lo, rep.ci_hi, ev.closed_form, enum, gap))
    write_csv(out / "variance.csv",
              ["estimator", "K", "B", "var", "ci_lo", "ci_hi", "exact", "enumerated", "gap"], rows)

    write_csv(out / "decomposition.csv", ["quantity", "value"], [
        ("var_g", d.var_g), ("e_pair_var_lam", d.e_pair_var_lam), ("var_pair_g1", d.var_pair_g1),
        ("e_lam_var_pair", d.e_lam_var_pair), ("var_lam_g2", d.var_lam_g2),
        ("residual_pair", d.residual_pair), ("residual_lam", d.residual_lam), ("b0", d.b0)])
    for name in ("residual_pair", "residual_lam"):
        if abs(getattr(d, name)) > TOL:
            breaches.append(f"decomposition {name} = {getattr(d, name):.3g}")

    rep = check_batch_threshold(problem, dist, cfg["b0_k"], cfg["b0_bs"])
    write_csv(out / "b0.csv", ["K", "B", "b0", "var_multimix", "var_largebatch", "multimix_le",
                               "b_ge_b0", "consistent"],
              [(rep.k, r.b, rep.b0, r.var_multimix, r.var_largebatch, r.multimix_le, r.expected_le,
                r.consistent) for r in rep.rows])
    if not rep.ok:
        breaches.append("threshold comparison disagrees with B >= B0")

    print(f"decomposition residuals {d.residual_pair:.3g} {d.residual_lam:.3g}; B0 = {d.b0:.6g}")
    if rep.note:
        print(rep.note)
    for msg in breaches:
        print(f"tolerance breach: {msg}", file=sys.stderr)
    return EXIT_TOLERANCE if breaches else EXIT_OK


# ------------------------------------------------------------- mix preview


def cmd_mix_preview(cfg, seed, out: Path, manifest) -> int:
    from multimix.mixers import Sample, cut_multimix, input_multimix, preview_to_image, puzzle_multimix
    from multimix.persist import write_csv
    from multimix.ppm import read_ppm, write_ppm
    from multimix.rand_dist import Rng, sample_ordered_weights

    if not cfg["a"] or not cfg["b"]:
        raise UsageError("mix-preview needs a=<image> and b=<image>")
    unknown = set(cfg["mixers"]) - {"input", "cut", "puzzle"}
    if unknown or not cfg["mixers"]:
        raise UsageError(f"mixers must be drawn from input, cut, puzzle; got {cfg['mixers']}")
    if cfg["k"] < 1 or len(cfg["grid"]) != 2:
        raise UsageError("need k >= 1 and grid=<cols>,<rows>")
    img_a, img_b = read_ppm(cfg["a"]), read_ppm(cfg["b"])
    if img_a.shape != img_b.shape:
        raise ValueError(f"image shapes differ: {img_a.shape} vs {img_b.shape}")
    pair = (Sample.image(img_a / 255.0, [1.0, 0.0], 0), Sample.image(img_b / 255.0, [0.0, 1.0], 1))
    rng = Rng(seed)
    seq = sample_ordered_weights(rng.substream(0), cfg["alpha"], cfg["k"])
    rows = []
    for i, name in enumerate(cfg["mixers"]):
        sub = rng.substream(1, i)
        if name == "input":
            panels = input_multimix(pair, seq)
        elif name == "cut":
            panels = cut_multimix(pair, seq, sub)
        else:
            panels = puzzle_multimix(pair, seq, sub, cfg["d"], tuple(cfg["grid"]))
        images = [preview_to_image(p) for p in panels]
        for j, (p, img) in enumerate(zip(panels, images)):
            write_ppm(out / f"{name}_{j}.ppm", img)
            box = p.info.get("box", (None,) * 4)
            rows.append((name, j, seq[j], p.lam) + tuple(box))
            print(f"{name} panel {j}: lambda {seq[j]:.4f} effective {p.lam:.4f}")
        write_ppm(out / f"{name}_strip.ppm", np.concatenate(images, axis=1))
    write_csv(out / "preview.csv", ["mixer", "panel", "lam", "lam_eff", "x0", "y0", "x1", "y1"], rows)
    return EXIT_OK


# ------------------------------------------------------------------- calib


def cmd_calib(cfg, seed, out: Path, manifest) -> int:
    from multimix.experiments import data_rng, ece, gen_spiral
    from multimix.persist import write_csv
    from multimix.tinynet import load_checkpoint

    if cfg["split"] not in ("train", "test"):
        raise UsageError("split must be train or test")
    if cfg["m"] < 1:
        raise UsageError("m must be >= 1")
    if not cfg["checkpoint"]:
        raise UsageError("calib needs checkpoint=<path>")
    path = Path(cfg["checkpoint"])
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    net = load_checkpoint(path)
    data = gen_spiral(data_rng(seed), _spiral_cfg(cfg))
    rep = ece(net, *data.split(cfg["split"]), m=cfg["m"])
    rows = []
    for i in range(rep.m):
        c = int(rep.counts[i])
        rows.append((i + 1, i / rep.m, (i + 1) / rep.m, c, rep.acc[i] if c else None,
                     rep.conf[i] if c else None, None))
    rows.append(("total", 0.0, 1.0, rep.n, None, None, rep.ece))
    write_csv(out / "ece.csv", ["bin", "lo", "hi", "count", "acc", "conf", "ece"], rows)
    print(f"ECE ({cfg['split']}, M={rep.m}) = {rep.ece:.6f}")
    return EXIT_OK


COMMANDS = {"spiral": cmd_spiral, "variance": cmd_variance, "mix-preview": cmd_mix_preview,
            "calib": cmd_calib}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multimix", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    common.add_argument("--config", help="file of 'key = value' lines")
    common.add_argument("--out", help="output directory (else $MULTIMIX_OUT, else runs/<command>)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=f"run the {name} driver")
        if name == "spiral":
            p.add_argument("--seeds", type=int, help="number of seeds (same as seeds=N)")
        p.add_argument("overrides", nargs="*", metavar="key=value")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cli_values = parse_overrides(args.overrides)
        if getattr(args, "seeds", None) is not None:
            cli_values["seeds"] = str(args.seeds)
        cfg = resolve(args.command, file_values, cli_values)
    except UsageError as e:
        print(f"multimix {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"multimix {args.command}: cannot read config: {e}", file=sys.stderr)
        return EXIT_USAGE

    out = Path(args.out or os.environ.get("MULTIMIX_OUT") or Path("runs") / args.command)
    from multimix.persist import Manifest
    try:
        out.mkdir(parents=True, exist_ok=True)
        snapshot = {k: (list(v) if isinstance(v, (list, tuple)) else v) for k, v in cfg.items()}
        manifest = Manifest(out, args.command, {"seed": args.seed, **snapshot})
    except OSError as e:
        print(f"multimix {args.command}: cannot write to {out}: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    t0 = time.perf_counter()
    try:
        code = COMMANDS[args.command](cfg, args.seed, out, manifest)
    except UsageError as e:
        print(f"multimix {args.command}: {e}", file=sys.stderr)
        code = EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"multimix {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        code = EXIT_RUNTIME
    manifest.time("total", time.perf_counter() - t0)
    manifest.finalize({EXIT_OK: "ok", EXIT_TOLERANCE: "tolerance-breach"}.get(code, "failed"))
    return code


if __name__ == "__main__":
    sys.exit(main())
