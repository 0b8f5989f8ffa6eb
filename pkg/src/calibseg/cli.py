"""``calibseg`` command line: gen / train / eval / rank / gradcheck / kernel / prior.

Exit codes: 0 success, 1 invalid input or usage, 2 gradient check failure.
Machine-readable outputs go to files; diagnostics go to stderr.  Every output
artifact gets a run manifest (resolved config, input digests, version) next
to it: ``<out>/manifest.json`` for directory outputs, ``<out>.manifest.json``
for single files.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, _backend
from .core import (
    CalibsegError,
    InvalidInputError,
    is_simplex,
    read_field,
    read_labels,
    softmax,
    write_field,
    write_labels,
)
from .gradcheck import TOLERANCE, run_gradcheck
from .losses import LossConfig, LossKind
from .metrics import DEFAULT_BINS, case_metrics, reliability_bins
from .priors import PriorConfig, gaussian_kernel, prior_field
from .ranking import Orientation, mean_case_rank, parse_table_csv, sum_rank
from .synthbench import (
    BenchConfig,
    Case,
    DirectLogit,
    LinearPixel,
    TrainConfig,
    evaluate_run,
    generate_dataset,
    train,
)

EXIT_OK, EXIT_INVALID, EXIT_GRADCHECK = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- helpers -----------------------------------------------------------------


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _manifest(subcommand: str, config: dict, inputs: list, seeds: list) -> dict:
    digests = {}
    for p in inputs:
        p = Path(p)
        files = sorted(x for x in p.rglob("*") if x.is_file()) if p.is_dir() else [p]
        for f in files:
            digests[f.as_posix()] = _digest(f)
    return {
        "subcommand": subcommand,
        "resolved_config": config,
        "input_digests": digests,
        "tool_version": __version__,
        "seeds": seeds,
    }


def _write_file_manifest(out: Path, manifest: dict) -> None:
    Path(str(out) + ".manifest.json").write_text(_dump_json(manifest))


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise InvalidInputError("config file must hold a JSON object")
    # a run manifest carries the resolved config of the run it describes
    if "resolved_config" in doc:
        doc = doc["resolved_config"]
    return doc


def _case_stem(i: int) -> str:
    return f"case_{i:04d}"


def write_dataset(out: Path, cases: list[Case]) -> list[dict]:
    entries = []
    for i, case in enumerate(cases):
        stem = _case_stem(i)
        files = {
            "image": f"{stem}.image.fld",
            "labels": f"{stem}.lab",
            "posterior": f"{stem}.posterior.fld",
            "clean": f"{stem}.clean.lab",
        }
        write_field(out / files["image"], case.image)
        write_labels(out / files["labels"], case.labels)
        write_field(out / files["posterior"], case.posterior)
        write_labels(out / files["clean"], case.clean)
        entries.append({"id": stem, **files})
    return entries


def read_dataset(path) -> list[Case]:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise InvalidInputError(f"{path} has no manifest.json (not a generated dataset)")
    doc = json.loads(manifest_path.read_text())
    cases = []
    for entry in sorted(doc["cases"], key=lambda e: e["id"]):
        cases.append(Case(
            image=read_field(path / entry["image"]),
            labels=read_labels(path / entry["labels"]),
            posterior=read_field(path / entry["posterior"]),
            clean=read_labels(path / entry["clean"]),
        ))
    if not cases:
        raise InvalidInputError(f"{path} holds no cases")
    return cases


# -- subcommands ---------------------------------------------------------------


def cmd_gen(args) -> int:
    conf = _load_config_file(args.config)
    n_cases = conf.pop("cases", 1)
    if args.cases is not None:
        n_cases = args.cases
    if args.seed is not None:
        conf["seed"] = args.seed
    bench = BenchConfig.from_dict(conf)
    cases = generate_dataset(bench, n_cases)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = write_dataset(out, cases)
    resolved = {**bench.to_dict(), "cases": n_cases}
    inputs = [args.config] if args.config else []
    manifest = _manifest("gen", resolved, inputs, [bench.seed])
    manifest["cases"] = entries
    (out / "manifest.json").write_text(_dump_json(manifest))
    return EXIT_OK


_LOSS_FLAGS = {
    "lam": "lam", "alpha": "alpha", "gamma": "gamma", "margin": "margin",
    "sigma": "sigma", "penalty": "penalty", "constrain_on": "constrain_on",
    "reduction": "reduction",
}


def _loss_config(conf: dict, args) -> LossConfig:
    loss = dict(conf.get("loss", {}))
    if args.loss is not None:
        if loss.get("kind") not in (None, args.loss):
            loss = {}
        loss["kind"] = args.loss
    loss.setdefault("kind", "ce")
    for flag, key in _LOSS_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            loss[key] = value
    kind = LossKind(loss["kind"])
    prior = loss.pop("prior", None)
    if kind is LossKind.NACL:
        prior = dict(prior or {})
        if args.prior is not None:
            prior["mode"] = args.prior
        if args.patch is not None:
            prior["patch_size"] = args.patch
        if args.prior_sigma is not None:
            prior["sigma"] = args.prior_sigma
        if args.no_normalize:
            prior["normalize"] = False
        loss["prior"] = PriorConfig(**prior)
    elif kind is LossKind.SVLS and args.patch is not None:
        loss["patch_size"] = args.patch
    elif args.prior is not None or args.prior_sigma is not None or args.no_normalize:
        raise InvalidInputError(f"prior options apply only to the nacl loss, not {kind.value}")
    return LossConfig(**loss)


def cmd_train(args) -> int:
    conf = _load_config_file(args.config)
    loss = _loss_config(conf, args)
    steps = args.steps if args.steps is not None else conf.get("steps", 2000)
    lr = args.lr if args.lr is not None else conf.get("lr", 0.1)
    seed = args.seed if args.seed is not None else conf.get("seed", 0)
    model_kind = args.model or conf.get("model", "direct")
    bins = args.bins if args.bins is not None else conf.get("bins", DEFAULT_BINS)
    tconf = TrainConfig(loss=loss, steps=steps, lr=lr, seed=seed)
    data = read_dataset(args.data)
    eval_data = read_dataset(args.eval_data) if args.eval_data else data
    num_classes = data[0].labels.num_classes
    if eval_data[0].labels.num_classes != num_classes:
        raise InvalidInputError(
            f"evaluation data has {eval_data[0].labels.num_classes} classes, training data {num_classes}"
        )
    if model_kind == "direct":
        if args.eval_data:
            raise InvalidInputError("a direct-logit model can only be evaluated on its training cases")
        model = DirectLogit.zeros(data)
    elif model_kind == "linear":
        model = LinearPixel.init(num_classes, seed)
    else:
        raise InvalidInputError(f"unknown model {model_kind!r}")
    model, trace = train(model, data, tconf)
    report = evaluate_run(model, eval_data, bins)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(model, DirectLogit):
        for i, field in enumerate(model.logits):
            write_field(out / f"params_{_case_stem(i)}.fld", field)
    else:
        (out / "params.json").write_text(_dump_json({
            "model": "linear",
            "features": ["intensity", "mean3x3_intensity"],
            "weights": model.weights.tolist(),
            "bias": model.bias.tolist(),
        }))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss"])
    for i, v in enumerate(trace):
        writer.writerow([i, repr(float(v))])
    (out / "trace.csv").write_text(buf.getvalue())
    (out / "report.json").write_text(_dump_json(report.to_dict()))
    resolved = {
        "model": model_kind,
        "loss": loss.to_dict(),
        "steps": steps,
        "lr": lr,
        "seed": seed,
        "bins": bins,
    }
    inputs = [args.data] + ([args.eval_data] if args.eval_data else []) + ([args.config] if args.config else [])
    (out / "manifest.json").write_text(_dump_json(_manifest("train", resolved, inputs, [seed])))
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = read_field(args.pred)
    gt = read_labels(args.gt)
    probs = softmax(pred) if args.logits else pred
    if not is_simplex(probs, atol=1e-9):
        raise InvalidInputError("prediction is not a probability field (pass --logits for raw logits)")
    foreground_only = not args.all_pixels
    metrics = case_metrics(probs, gt, args.bins, foreground_only)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(_dump_json(metrics.to_dict()))
    resolved = {"bins": args.bins, "foreground_only": foreground_only, "logits": args.logits}
    inputs = [args.pred, args.gt]
    _write_file_manifest(out, _manifest("eval", resolved, inputs, []))
    if args.reliability:
        rel = Path(args.reliability)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["bin_lo", "bin_hi", "count", "accuracy", "confidence"])
        for b in reliability_bins(probs, gt, args.bins, foreground_only):
            writer.writerow([
                repr(b.lo), repr(b.hi), b.count,
                "" if b.accuracy is None else repr(b.accuracy),
                "" if b.confidence is None else repr(b.confidence),
            ])
        rel.write_text(buf.getvalue())
        _write_file_manifest(rel, _manifest("eval", resolved, inputs, []))
    return EXIT_OK


CASE_METRICS = (
    ("mean_dsc", Orientation.HIGHER),
    ("mean_hd95", Orientation.LOWER),
    ("ece", Orientation.LOWER),
    ("cece", Orientation.LOWER),
)


def load_case_directory(path) -> tuple[list[str], np.ndarray]:
    """``path/<method>/<case>.json`` CaseMetrics files -> (methods, cases x methods x 4)."""
    path = Path(path)
    methods = sorted(p.name for p in path.iterdir() if p.is_dir())
    if not methods:
        raise InvalidInputError(f"{path} has no method subdirectories")
    case_ids = sorted({f.stem for m in methods for f in (path / m).glob("*.json")})
    if not case_ids:
        raise InvalidInputError(f"{path} holds no case JSON files")
    data = np.full((len(case_ids), len(methods), len(CASE_METRICS)), np.nan)
    for j, m in enumerate(methods):
        for i, cid in enumerate(case_ids):
            f = path / m / f"{cid}.json"
            if not f.exists():
                continue
            doc = json.loads(f.read_text())
            for k, (name, _) in enumerate(CASE_METRICS):
                if name not in doc:
                    raise InvalidInputError(f"{f} lacks {name!r}")
                if doc[name] is not None:
                    data[i, j, k] = float(doc[name])
    return methods, data


def cmd_rank(args) -> int:
    if args.mode == "sum":
        if not args.table:
            raise InvalidInputError("--mode sum needs --table")
        table = parse_table_csv(Path(args.table).read_text())
        result = sum_rank(table)
        source = args.table
    else:
        source = args.cases or args.table
        if not source:
            raise InvalidInputError("--mode case needs --cases DIR")
        methods, data = load_case_directory(source)
        result = mean_case_rank(data, [o for _, o in CASE_METRICS], methods)
    text = _dump_json(result.to_dict())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        _write_file_manifest(out, _manifest("rank", {"mode": args.mode}, [source], []))
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    kinds = list(LossKind) if args.loss == "all" else [LossKind(args.loss)]
    results = run_gradcheck(kinds, seed=args.seed, trials=args.trials)
    print(f"{'loss':<6} {'max_rel_err':>12} {'excluded_px':>12} status")
    for r in results:
        print(f"{r.kind:<6} {r.max_error:12.3e} {r.excluded_pixels:12d} {'ok' if r.passed else 'FAIL'}")
    if all(r.passed for r in results):
        return EXIT_OK
    print(f"gradient check failed (tolerance {TOLERANCE:g})", file=sys.stderr)
    return EXIT_GRADCHECK


def cmd_kernel(args) -> int:
    w = gaussian_kernel(args.size, args.sigma)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    for row in w:
        writer.writerow([repr(float(x)) for x in row])
    return EXIT_OK


def cmd_prior(args) -> int:
    labels = read_labels(args.labels)
    config = PriorConfig(
        mode=args.mode, patch_size=args.patch,
        sigma=args.sigma if args.sigma is not None else PriorConfig.sigma,
        normalize=not args.no_normalize,
    )
    tau = prior_field(labels, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_field(out, tau)
    resolved = {
        "mode": config.mode.value, "patch_size": config.patch_size,
        "sigma": config.sigma, "normalize": config.normalize,
    }
    _write_file_manifest(out, _manifest("prior", resolved, [args.labels], []))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="calibseg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"calibseg {__version__} ({_backend.NAME} kernels)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic segmentation dataset")
    g.add_argument("--config", help="flat JSON BenchConfig (or a gen manifest)")
    g.add_argument("--cases", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a toy model with one of the losses")
    t.add_argument("--data", required=True)
    t.add_argument("--eval-data")
    t.add_argument("--config", help="flat JSON train config (or a train manifest)")
    t.add_argument("--loss", choices=[k.value for k in LossKind])
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--alpha", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--margin", type=float)
    t.add_argument("--sigma", type=float, help="SVLS kernel sigma")
    t.add_argument("--prior", choices=["mean", "gaussian", "max", "min", "median", "mode"])
    t.add_argument("--patch", type=int)
    t.add_argument("--prior-sigma", type=float)
    t.add_argument("--no-normalize", action="store_true")
    t.add_argument("--penalty", choices=["linear", "quadratic"])
    t.add_argument("--constrain-on", dest="constrain_on", choices=["logits", "softmax"])
    t.add_argument("--reduction", choices=["mean", "sum"])
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--model", choices=["direct", "linear"])
    t.add_argument("--seed", type=int)
    t.add_argument("--bins", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="compute case metrics for a prediction")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--bins", type=int, default=DEFAULT_BINS)
    e.add_argument("--logits", action="store_true", help="--pred holds logits, not probabilities")
    e.add_argument("--all-pixels", action="store_true", help="disable the foreground filter for ECE")
    e.add_argument("--reliability")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rank", help="aggregate method rankings")
    r.add_argument("--table")
    r.add_argument("--cases")
    r.add_argument("--mode", choices=["sum", "case"], default="sum")
    r.add_argument("--out")
    r.set_defaults(func=cmd_rank)

    c = sub.add_parser("gradcheck", help="finite-difference check of loss gradients")
    c.add_argument("--loss", default="all", choices=["all", *(k.value for k in LossKind)])
    c.add_argument("--seed", type=int, default=7)
    c.add_argument("--trials", type=int, default=20)
    c.set_defaults(func=cmd_gradcheck)

    k = sub.add_parser("kernel", help="print a Gaussian kernel as CSV")
    k.add_argument("--size", type=int, default=3)
    k.add_argument("--sigma", type=float, default=1.0)
    k.set_defaults(func=cmd_kernel)

    pr = sub.add_parser("prior", help="compute a prior field from a label map")
    pr.add_argument("--labels", required=True)
    pr.add_argument("--mode", default="mean", choices=["mean", "gaussian", "max", "min", "median", "mode"])
    pr.add_argument("--patch", type=int, default=3)
    pr.add_argument("--sigma", type=float)
    pr.add_argument("--no-normalize", action="store_true")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_prior)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (CalibsegError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"calibseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
