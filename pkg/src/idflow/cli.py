"""Command-line entry point: ``idflow <subcommand> [flags]``.

Subcommands: gen-data, train, fuse, sample, eval, gradcheck.

Every subcommand accepts ``--config FILE``, a flat key-value file (INI
syntax, section header optional) whose keys are flag names such as
``steps = 500`` or ``lambda = 0.25``.  Keys may be namespaced by subcommand
(``train.steps = 500`` or a ``[train]`` section) so one file can serve a
whole pipeline.  Precedence is flags > file > defaults.
The effective configuration is written next to the primary output as
``<output>.config.json``.  When ``--seed`` is absent the ``IDFLOW_SEED``
environment variable is used, then 0.

Exit codes: 0 success, 1 gradcheck failure, 2 usage, 3 computation failure,
4 IO.
"""

import argparse
import configparser
import json
import logging
import os
import sys

import numpy as np

from . import data as D
from . import io
from .errors import (ConfigurationError, DegenerateVectorError, DimensionError, DivergenceError,
                     DomainError, EvaluationError, FormatError, FusionError, MismatchError)
from .flow import SamplerConfig, sample_euler
from .gradcheck import TOLERANCE, gradcheck_suite
from .id_attention import FusionSpec
from .model import ToyDiTConfig, VelocityModel, init_params
from .training import (Checkpoint, TrainConfig, fuse_params, fused_alpha0, pretrain_base,
                       search_fusion_coefficients, train_variant, variant_alpha0,
                       write_losses_csv)

log = logging.getLogger("idflow")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_COMPUTE, EXIT_IO = 0, 1, 2, 3, 4
GENERATIONS_KIND = "generations"
REPORT_COLUMNS = ("identity", "facesim", "editdiv", "promptfollow")


class UsageError(Exception):
    pass


# -- config handling ---------------------------------------------------------

def read_config_file(path):
    """``(namespace, key, value)`` triples from a flat key-value file.

    A key may be namespaced as ``command.key`` or placed under a
    ``[command]`` section; bare keys (or an ``[idflow]`` section) apply to
    every subcommand.  A leading section header is optional.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc.strerror}") from exc
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text if text.lstrip().startswith("[") else "[idflow]\n" + text)
    except configparser.Error as exc:
        raise UsageError(f"malformed config file {path}: {exc}") from exc
    out = []
    for section in parser.sections():
        for key, value in parser.items(section):
            ns = None if section == "idflow" else section
            if "." in key:
                ns, key = key.split(".", 1)
            norm = None if ns is None else ns.replace("_", "-")
            out.append((norm, key.replace("-", "_"), value))
    return out


def _apply_config(parser, args, argv):
    """Re-parse with config-file values installed as defaults."""
    if not getattr(args, "config", None):
        return args
    values = read_config_file(args.config)
    sub = parser._subparsers_by_name[args.command]
    known = {}
    for action in sub._actions:
        if action.dest in ("config", "help"):
            continue
        known[action.dest] = action
        for opt in action.option_strings:
            if opt.startswith("--"):
                known[opt[2:].replace("-", "_")] = action
    defaults = {}
    for ns, key, raw in values:
        if ns is not None and ns != args.command:
            continue
        if key not in known:
            raise UsageError(f"unknown key {key!r} in config file {args.config}")
        action = known[key]
        convert = action.type or str
        try:
            if isinstance(action, argparse._StoreTrueAction):
                value = raw.strip().lower() in ("1", "true", "yes", "on")
            elif action.nargs in ("+", "*"):
                value = [convert(v) for v in raw.split()]
            else:
                value = convert(raw)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"bad value for {key!r} in config file: {raw!r}") from exc
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"{key!r} must be one of {sorted(action.choices)}")
        defaults[action.dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def resolve_seed(seed):
    if seed is not None:
        return seed
    env = os.environ.get("IDFLOW_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise UsageError(f"IDFLOW_SEED must be an integer, got {env!r}") from exc


def effective_config(args, **extra):
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    cfg.update(extra)
    return cfg


def dump_config(output, cfg):
    io.write_atomic(f"{output}.config.json",
                    (json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n").encode())


def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


# -- generations files -------------------------------------------------------

def save_generations(path, x, identity, sample_index, z_attr, meta):
    tensors = {"x": x, "identity": np.asarray(identity, dtype=float),
               "sample_index": np.asarray(sample_index, dtype=float), "z_attr": z_attr}
    io.save(path, GENERATIONS_KIND, meta, tensors)


def load_generations(path):
    header, t = io.load(path, kind=GENERATIONS_KIND)
    return header["meta"], t


# -- subcommands -------------------------------------------------------------

def cmd_gen_data(args):
    seed = resolve_seed(args.seed)
    ds = D.gen_dataset(args.ids, args.per_id, seed, args.val_per_id)
    ds.save(args.output)
    summary = ds.summary()
    io.write_atomic(f"{args.output}.summary.json",
                    (json.dumps(summary, indent=2, sort_keys=True) + "\n").encode())
    dump_config(args.output, effective_config(args, seed=seed))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _train_config(args, seed):
    overrides = {"seed": seed}
    for flag, field in (("steps", "total_steps"), ("batch_size", "batch_size"),
                        ("lambda_id", "lambda_id"), ("alpha0", "alpha0"), ("T", "T"),
                        ("lr", "lr0"), ("lr_min", "lr_min"), ("weight_decay", "weight_decay")):
        value = getattr(args, flag)
        if value is not None:
            overrides[field] = value
    if args.variant:
        return TrainConfig.preset(args.variant, **overrides)
    return TrainConfig(**overrides)


def build_base(seed, base_steps, base_lr=2e-3):
    """Deterministic frozen base for a seed: init, then the identity-free fit."""
    params = init_params(ToyDiTConfig(), seed)
    if base_steps > 0:
        params = pretrain_base(params, steps=base_steps, seed=seed, lr0=base_lr)
    return params


def cmd_train(args):
    seed = resolve_seed(args.seed)
    cfg = _train_config(args, seed)
    ds = D.Dataset.load(args.data)
    if args.base:
        base = Checkpoint.load(args.base).params
        base_info = {"source": os.path.basename(args.base)}
    else:
        base = build_base(seed, args.base_steps, args.base_lr)
        base_info = {"init_seed": seed, "fit_steps": args.base_steps, "fit_lr": args.base_lr}
    if args.save_base:
        Checkpoint(base, {"base": base_info}).save(args.save_base)
    losses = args.losses or os.path.join(os.path.dirname(os.path.abspath(args.output)),
                                         "losses.csv")
    ck = train_variant(ds, base, cfg)
    ck.meta["base"] = base_info
    ck.save(args.output)
    write_losses_csv(losses, ck.history)
    dump_config(args.output, effective_config(args, seed=seed, losses=losses,
                                              train_config=cfg.to_dict()))
    final = ck.meta["probe_final"]
    print(json.dumps({"checkpoint": args.output, "losses": losses, "variant": cfg.variant_tag,
                      "probe_initial": ck.meta["probe_initial"], "probe_final": final},
                     sort_keys=True))
    return EXIT_OK


def cmd_fuse(args):
    variants = [Checkpoint.load(p) for p in args.checkpoints]
    ids = tuple(os.path.basename(p) for p in args.checkpoints)
    for ck, name in zip(variants, ids):
        ck.meta.setdefault("name", name)
    table = None
    if args.weights is not None:
        if len(args.weights) != len(variants):
            raise UsageError(f"{len(args.weights)} weights for {len(variants)} checkpoints")
        try:
            spec = FusionSpec(tuple(args.weights), ids)
        except FusionError as exc:
            raise UsageError(str(exc)) from exc
    else:
        if not args.data:
            raise UsageError("--data is required when --weights is omitted")
        ds = D.Dataset.load(args.data)
        spec, table = search_fusion_coefficients(
            variants, ds, args.grid_step, SamplerConfig(steps=args.sample_steps),
            prompts_per_id=args.prompts_per_id, seed=resolve_seed(args.seed), return_table=True,
        )
        spec = FusionSpec(spec.coefficients, ids)
    fused = fuse_params(variants, spec)
    alpha0 = fused_alpha0(variants, spec.coefficients)
    meta = {
        "fusion": {
            "sources": list(ids),
            "coefficients": list(spec.coefficients),
            "searched": args.weights is None,
            "grid_step": args.grid_step if args.weights is None else None,
            "table": table,
        },
        "train": dict(variants[0].meta.get("train", {}), alpha0=alpha0, variant_tag="fused"),
    }
    Checkpoint(fused, meta).save(args.output)
    dump_config(args.output, effective_config(args, coefficients=list(spec.coefficients)))
    print(json.dumps({"fused": args.output, "coefficients": list(spec.coefficients),
                      "alpha0": alpha0}, sort_keys=True))
    return EXIT_OK


def _requests(ds, args):
    if args.identities:
        bad = [i for i in args.identities if not 0 <= i < ds.num_ids]
        if bad:
            raise UsageError(f"identities {bad} not in dataset (0..{ds.num_ids - 1})")
        idents = args.identities
    else:
        idents = list(range(ds.num_ids))
    rows = ds.split_indices(args.split)
    out = []
    for i in idents:
        mine = rows[ds.identity[rows] == i][:args.prompts_per_id]
        out.extend((int(i), int(j)) for j in mine)
    if not out:
        raise UsageError(f"no {args.split} prompts for the requested identities")
    return out


def cmd_sample(args):
    seed = resolve_seed(args.seed)
    ck = Checkpoint.load(args.checkpoint)
    ds = D.Dataset.load(args.data)
    sampler = SamplerConfig(steps=args.steps, cfg_scale=args.cfg_scale,
                            guidance_scale=args.guidance_scale, beta0=args.beta0,
                            qnoise_source=args.qnoise_source, grad_cap=args.grad_cap)
    alpha0 = args.alpha0 if args.alpha0 is not None else variant_alpha0(ck)
    reqs = _requests(ds, args)
    ident = np.array([i for i, _ in reqs])
    rows = np.array([j for _, j in reqs])
    e_ref = ds.e_ref[ident]
    x1 = np.random.default_rng(seed).standard_normal((len(reqs), D.TOKENS, D.WIDTH))
    null_c = np.broadcast_to(D.null_prompt(), ds.c[rows].shape)
    x = sample_euler(VelocityModel(ck.params, alpha0), x1, ds.c[rows], D.id_tokens(e_ref),
                     e_ref, sampler, id_encoder=D.id_encoder(), null_c=null_c)
    meta = {"sampler": sampler.to_dict(), "alpha0": alpha0, "seed": seed,
            "checkpoint": os.path.basename(args.checkpoint), "dataset": ds.summary()}
    save_generations(args.output, x, ident, rows, ds.z_attr[rows], meta)
    dump_config(args.output, effective_config(args, seed=seed, alpha0=alpha0,
                                              sampler=sampler.to_dict()))
    print(json.dumps({"generations": args.output, "count": len(reqs)}))
    return EXIT_OK


def cmd_eval(args):
    meta, t = load_generations(args.generations)
    ds = D.Dataset.load(args.data)
    n = t["x"].shape[0] if t["x"].ndim == 3 else 0
    if n == 0:
        raise UsageError("generations file is empty")
    if meta.get("dataset") is not None and meta["dataset"] != ds.summary():
        raise MismatchError("generations were produced from a different dataset")
    ident = t["identity"].astype(int)
    rows = t["sample_index"].astype(int)
    if ident.max() >= ds.num_ids or rows.max() >= len(ds) or np.any(ds.identity[rows] != ident):
        raise MismatchError("generation records do not match the dataset")
    pairs = [(D.GenerationRequest(int(i), ds.z_attr[j]), x) for i, j, x in zip(ident, rows, t["x"])]
    report = D.eval_metrics(pairs, ds)
    lines = [",".join(REPORT_COLUMNS)]
    for row in report.rows():
        lines.append(f"{row[0]},{row[1]!r},{row[2]!r},{row[3]!r}")
    io.write_atomic(args.output, ("\n".join(lines) + "\n").encode())
    json_path = os.path.splitext(args.output)[0] + ".json"
    io.write_atomic(json_path, (json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n").encode())
    dump_config(args.output, effective_config(args))
    print(json.dumps({"facesim": report.facesim, "editdiv": report.editdiv,
                      "promptfollow": report.promptfollow}, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args):
    seed0 = resolve_seed(args.seed)
    seeds = [seed0 + k for k in range(args.seeds)]
    results = gradcheck_suite(seeds, fault=args.inject_fault)
    ok = True
    for r in results:
        name, err = r.worst
        status = "ok" if err < args.tol else "FAIL"
        ok &= err < args.tol
        print(f"seed {r.seed}: worst {name} rel_err {err:.3e} {status}")
    if not ok:
        name, err = max((r.worst for r in results), key=lambda w: w[1])
        print(f"gradcheck failed: worst parameter {name} (relative error {err:.3e} >= {args.tol:g})",
              file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="idflow", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    subs = parser.add_subparsers(dest="command", required=True)
    parser._subparsers_by_name = {}

    def sub(name, func, help_text):
        p = subs.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="flat key-value config file (flags override it)")
        p.add_argument("--seed", type=int, default=None, help="seed (default: $IDFLOW_SEED or 0)")
        p.set_defaults(func=func)
        parser._subparsers_by_name[name] = p
        return p

    p = sub("gen-data", cmd_gen_data, "generate a synthetic dataset")
    p.add_argument("--ids", type=int, default=8)
    p.add_argument("--per-id", type=int, default=128)
    p.add_argument("--val-per-id", type=int, default=None)
    p.add_argument("-o", "--output", required=True)

    p = sub("train", cmd_train, "train the ID-integration weights")
    p.add_argument("--data", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--variant", choices=sorted(("A", "B")), default=None)
    p.add_argument("--lambda", dest="lambda_id", type=float, default=None)
    p.add_argument("--alpha0", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--T", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lr-min", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--base", default=None, help="checkpoint supplying the frozen base")
    p.add_argument("--base-steps", type=int, default=1000,
                   help="identity-free base fitting steps when --base is absent (0: init only)")
    p.add_argument("--base-lr", type=float, default=2e-3)
    p.add_argument("--save-base", default=None)
    p.add_argument("--losses", default=None, help="loss CSV (default: losses.csv beside output)")

    p = sub("fuse", cmd_fuse, "fuse ID weights of several checkpoints")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--weights", type=_float_list, default=None)
    p.add_argument("--data", default=None, help="dataset for the coefficient search")
    p.add_argument("--grid-step", type=float, default=0.1)
    p.add_argument("--prompts-per-id", type=int, default=4)
    p.add_argument("--sample-steps", type=int, default=20)

    p = sub("sample", cmd_sample, "generate with the Euler sampler")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--identities", type=int, nargs="+", default=None)
    p.add_argument("--prompts-per-id", type=int, default=4)
    p.add_argument("--split", choices=("val", "train"), default="val")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--cfg-scale", type=float, default=1.0)
    p.add_argument("--guidance", "--guidance-scale", dest="guidance_scale", type=float, default=3.5)
    p.add_argument("--beta0", type=float, default=0.1)
    p.add_argument("--alpha0", type=float, default=None)
    p.add_argument("--qnoise-source", choices=("current", "initial"), default="current")
    p.add_argument("--grad-cap", type=float, default=None)

    p = sub("eval", cmd_eval, "score a generations file")
    p.add_argument("--generations", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("-o", "--output", required=True, help="report CSV (JSON written beside it)")

    p = sub("gradcheck", cmd_gradcheck, "analytic vs finite-difference gradient check")
    p.add_argument("--seeds", type=int, default=1, help="number of independent seeds")
    p.add_argument("--tol", type=float, default=TOLERANCE)
    p.add_argument("--inject-fault", default=None, metavar="TENSOR",
                   help="corrupt the analytic gradient of TENSOR (self-test)")
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _apply_config(parser, args, argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except DivergenceError as exc:
        print(f"error: {exc} (step {exc.step})", file=sys.stderr)
        return EXIT_COMPUTE
    except (EvaluationError, FusionError, DimensionError, DegenerateVectorError,
            MismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        where = f": {exc.filename}" if getattr(exc, "filename", None) else ""
        print(f"error: {exc.strerror or exc}{where}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigurationError, DomainError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
