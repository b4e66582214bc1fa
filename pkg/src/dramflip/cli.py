"""Command-line entry point: ``dramflip <subcommand> ...``.

Every subcommand writes ``<output>.manifest.json`` next to its output.  A
manifest (or any JSON object whose keys are flag names with dashes turned
into underscores) can be passed back with ``--config``; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .attack import (AttackConfig, CommitMode, Layout, ProfileExhausted, build_weight_map,
                     compare_profiles, run_attack)
from .dram import (FORMAT_VERSION, ChipGeometry, FingerprintMismatch, Mechanism, TimingParams,
                   VulnerabilityConfig, check_format_version, generate_chip, load_chip, save_chip)
from .engine import DefenseConfig
from .profiler import flip_curve, load_profile, log_grid, profile_chip, save_profile, truth_profile
from .qnn import VICTIM_RECIPE, accuracy, cnn_spec, load_qnn, make_dataset, mlp_spec, quantize, save_qnn, train_float

log = logging.getLogger("dramflip")

SUBCOMMANDS = ("gen-chip", "profile", "curve", "train-victim", "attack", "compare", "report")


class UsageError(Exception):
    pass


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _defense(text: str) -> str:
    try:
        return DefenseConfig.parse(text).to_text()
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad defense {text!r}: use unlimited or mac:<N>") from exc


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dramflip", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file of flag values (flags override it)")
        p.add_argument("-o", "--output", required=False, help="output path")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = add("gen-chip", "generate a simulated chip descriptor")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--banks", type=int, default=1)
    p.add_argument("--rows", type=int, default=128)
    p.add_argument("--bits-per-row", type=int, default=1024)
    p.add_argument("--rh-density", type=float, default=0.005)
    p.add_argument("--rp-density", type=float, default=0.09)
    p.add_argument("--overlap", type=float, default=0.002)
    p.add_argument("--freq-mhz", type=float, default=2400.0)

    p = add("profile", "measure a RowHammer or RowPress vulnerability profile")
    p.add_argument("--chip", required=False)
    p.add_argument("--mech", choices=["rh", "rp"], default="rp")
    p.add_argument("--max-budget", type=int, default=None)
    p.add_argument("--polarity", choices=["both", "single"], default="both")
    p.add_argument("--oracle", type=_on_off, default=False,
                   help="on: read the profile off the ground truth instead of measuring it")

    p = add("curve", "cumulative flips versus budget")
    p.add_argument("--chip")
    p.add_argument("--profile", help="use an existing profile instead of profiling the chip")
    p.add_argument("--mech", choices=["rh", "rp"], default="rp")
    p.add_argument("--grid", default="log16", help="logN or a comma-separated budget list")

    p = add("train-victim", "train and quantize a victim model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset", choices=["blobs", "rings", "tiny_images"], default="blobs")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--arch", choices=["mlp", "cnn"], default="mlp")
    p.add_argument("--hidden", type=_int_list, default=[64, 64])
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--epochs", type=int, default=VICTIM_RECIPE["epochs"])
    p.add_argument("--lr", type=float, default=VICTIM_RECIPE["lr"])
    p.add_argument("--weight-decay", type=float, default=VICTIM_RECIPE["weight_decay"])
    p.add_argument("--noise", type=float, default=None, help="dataset noise level")
    p.add_argument("--n-q", type=int, default=8)

    for name, help_text in (("attack", "run the profile-constrained bit-flip attack"),
                            ("compare", "paired attacks with several profiles over several seeds")):
        p = add(name, help_text)
        p.add_argument("--chip")
        p.add_argument("--model")
        p.add_argument("--defense", type=_defense, default="unlimited")
        p.add_argument("--commit", choices=[m.value for m in CommitMode], default="logical")
        p.add_argument("--direction-aware", type=_on_off, default=True)
        p.add_argument("--layout", choices=[l.value for l in Layout], default="shuffle")
        p.add_argument("--row-stride", type=int, default=1)
        p.add_argument("--max-flips", type=int, default=500)
        p.add_argument("--objective", type=float, default=None,
                       help="target accuracy (default: random guess + 0.02)")
        p.add_argument("--batch-size", type=int, default=128)
        if name == "attack":
            p.add_argument("--profile")
            p.add_argument("--seed", type=int, default=0, help="weight placement and attack batch seed")
        else:
            p.add_argument("--profiles", help="comma-separated profile paths")
            p.add_argument("--seeds", type=int, default=5, help="number of paired seeds (0..N-1)")

    p = add("report", "summarise existing artifacts without re-simulating")
    p.add_argument("--inputs", help="comma-separated artifact paths")
    return parser


def _load_config(path: str) -> dict:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    if "format_version" in data:
        check_format_version(data["format_version"], "config")
    if "config" in data and isinstance(data["config"], dict):  # a run manifest
        data = data["config"]
    return data


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        config = _load_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.subcommand]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(config) - known - {"subcommand"})
        if unknown:
            sub.error(f"unknown config keys: {', '.join(unknown)}")
        if config.get("subcommand", args.subcommand) != args.subcommand:
            sub.error(f"config is for {config['subcommand']!r}, not {args.subcommand!r}")
        # config values become defaults, so explicit flags still override them
        defaults = {k: v for k, v in config.items() if k not in ("config", "subcommand")}
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _resolved(args) -> dict:
    skip = {"config", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def write_manifest(args, outputs: list[str], inputs: list[str], started: float) -> Path:
    manifest = {
        "format_version": FORMAT_VERSION,
        "tool_version": __version__,
        "subcommand": args.subcommand,
        "config": _resolved(args),
        "seeds": {k: v for k, v in _resolved(args).items() if k in ("seed", "seeds")},
        "inputs": inputs,
        "outputs": outputs,
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
    }
    path = Path(args.output + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# -- subcommands ----------------------------------------------------------------

def cmd_gen_chip(args):
    chip = generate_chip(ChipGeometry(args.banks, args.rows, args.bits_per_row),
                         TimingParams(freq_mhz=args.freq_mhz),
                         VulnerabilityConfig(rh_cell_density=args.rh_density, rp_cell_density=args.rp_density,
                                             overlap_fraction=args.overlap, seed=args.seed))
    save_chip(chip, args.output)
    print(f"chip {chip.fingerprint()} -> {args.output}")
    return [args.output], []


def cmd_profile(args):
    _require(args, "chip")
    chip = load_chip(args.chip)
    mech = Mechanism[args.mech.upper()]
    if args.oracle:
        profile = truth_profile(chip, mech)
    else:
        profile = profile_chip(chip, mech, args.max_budget, args.polarity)
    save_profile(profile, args.output)
    print(f"{len(profile)} {mech.name} cells -> {args.output}")
    return [args.output, args.output + ".json"], [args.chip]


def _grid(text: str, max_budget: int) -> list[int]:
    if text.startswith("log"):
        return log_grid(max_budget, int(text[3:]))
    return _int_list(text)


def cmd_curve(args):
    inputs = []
    if args.profile:
        profile = load_profile(args.profile)
        inputs.append(args.profile)
        if args.chip:
            profile.check_chip(load_chip(args.chip))
            inputs.append(args.chip)
    else:
        _require(args, "chip")
        profile = profile_chip(load_chip(args.chip), Mechanism[args.mech.upper()])
        inputs.append(args.chip)
    curve = flip_curve(profile, _grid(args.grid, profile.max_budget))
    Path(args.output).write_text(curve.to_csv())
    print(f"{len(curve.points)} points -> {args.output}")
    return [args.output], inputs


def cmd_train_victim(args):
    train, test = make_dataset(args.dataset, args.classes, args.samples, args.seed, noise=args.noise)
    in_shape = train.inputs.shape[1:]
    if args.arch == "mlp":
        if len(in_shape) != 1:
            raise UsageError("the mlp architecture needs a flat dataset (blobs or rings)")
        spec = mlp_spec(in_shape[0], args.hidden, args.classes)
    else:
        if len(in_shape) != 3:
            raise UsageError("the cnn architecture needs the tiny_images dataset")
        spec = cnn_spec(in_shape[0], in_shape[1], args.channels, args.classes)
    model = train_float(spec, train, args.epochs, args.lr, args.seed, test=test,
                        weight_decay=args.weight_decay)
    q = quantize(model, args.n_q)
    q.seed = args.seed
    q.meta = {"dataset": {"kind": args.dataset, "num_classes": args.classes, "samples": args.samples,
                          "seed": args.seed, "noise": args.noise}}
    save_qnn(q, args.output)
    acc = accuracy(q, test)
    print(f"float test acc {model.history['test_accuracy']:.4f}, quantized {acc.accuracy:.4f} -> {args.output}")
    return [args.output], []


def _test_set(model):
    meta = model.meta.get("dataset")
    if not meta:
        raise UsageError("model checkpoint carries no dataset description")
    return make_dataset(meta["kind"], meta["num_classes"], meta["samples"], meta["seed"],
                        noise=meta.get("noise"))[1]


def _attack_config(args) -> AttackConfig:
    return AttackConfig(objective_accuracy=args.objective, max_flips=args.max_flips,
                        commit_mode=CommitMode(args.commit), direction_aware=args.direction_aware,
                        defense=DefenseConfig.parse(args.defense))


def cmd_attack(args):
    _require(args, "chip", "model", "profile")
    chip = load_chip(args.chip)
    model = load_qnn(args.model)
    profile = load_profile(args.profile)
    profile.check_chip(chip)
    test = _test_set(model)
    wmap = build_weight_map(model, chip, args.layout, row_stride=args.row_stride, seed=args.seed)
    config = _attack_config(args)
    try:
        result = run_attack(model, chip, profile, wmap, config, test.batch(args.batch_size, args.seed), test)
    except ProfileExhausted as exc:
        log.warning("%s", exc)
        result = exc.partial
    result.save(args.output)
    csv_path = str(Path(args.output).with_suffix(".csv"))
    print(f"{result.total_flips} flips, accuracy {result.baseline_accuracy:.4f} -> {result.final_accuracy:.4f}, "
          f"{'succeeded' if result.succeeded else 'failed'} ({result.stop_reason}) -> {args.output}")
    return [args.output, csv_path], [args.chip, args.model, args.profile]


def cmd_compare(args):
    _require(args, "chip", "model", "profiles")
    chip = load_chip(args.chip)
    model = load_qnn(args.model)
    paths = [p for p in args.profiles.split(",") if p]
    if len(paths) < 2:
        raise UsageError("--profiles needs at least two comma-separated paths")
    profiles = {}
    for path in paths:
        prof = load_profile(path)
        prof.check_chip(chip)
        profiles[f"{prof.mechanism.name.lower()}:{Path(path).name}"] = prof
    test = _test_set(model)
    res = compare_profiles(model, chip, profiles, list(range(args.seeds)), test, _attack_config(args),
                           args.batch_size, args.layout, args.row_stride)
    out = res.to_dict()
    out["profiles"] = list(profiles)
    Path(args.output).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    print(f"medians {res.medians}, ratio {res.ratio} -> {args.output}")
    return [args.output], [args.chip, args.model] + paths


def _summarise(path: Path) -> list[str]:
    if path.suffix == ".csv":
        lines = path.read_text().splitlines()
        return [f"## {path.name}", "", f"{len(lines) - 1} rows, header `{lines[0]}`",
                f"last row: `{lines[-1]}`" if len(lines) > 1 else "", ""]
    data = json.loads(path.read_text())
    check_format_version(data.get("format_version", "?"), path.name)
    out = [f"## {path.name}", ""]
    if "total_flips" in data:
        acc = data["accuracy_trajectory"]
        out += [f"- mechanism: {data['mechanism']}", f"- flips: {data['total_flips']}",
                f"- accuracy: {acc[0]:.4f} -> {acc[-1]:.4f} (objective {data['objective_accuracy']:.4f})",
                f"- succeeded: {data['succeeded']} ({data['stop_reason']})",
                f"- time budget: {data['time_budget_cycles']} cycles"]
    elif "medians" in data:
        out += [f"- {name}: median {data['medians'][name]}, per seed {data['scores'][name]}"
                for name in data["medians"]]
        out.append(f"- ratio of medians: {data['ratio']}")
    elif "geometry" in data:
        g = data["geometry"]
        out.append(f"- chip {g['banks']}x{g['rows_per_bank']}x{g['bits_per_row']}, seed {data['seed']}")
    else:
        out.append("- " + ", ".join(sorted(data)))
    return out + [""]


def cmd_report(args):
    _require(args, "inputs")
    paths = [Path(p) for p in args.inputs.split(",") if p]
    lines = ["# dramflip report", ""]
    for p in paths:
        lines += _summarise(p)
    Path(args.output).write_text("\n".join(lines))
    print(f"report on {len(paths)} artifacts -> {args.output}")
    return [args.output], [str(p) for p in paths]


HANDLERS = {"gen-chip": cmd_gen_chip, "profile": cmd_profile, "curve": cmd_curve,
            "train-victim": cmd_train_victim, "attack": cmd_attack, "compare": cmd_compare,
            "report": cmd_report}


def run(argv: list[str] | None = None) -> int:
    """Run one subcommand; returns 0 on success, 2 on usage errors, 1 on runtime failures."""
    argv = sys.argv[1:] if argv is None else list(argv)
    started = time.perf_counter()
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _require(args, "output")
        outputs, inputs = HANDLERS[args.subcommand](args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"dramflip: usage error: {exc}", file=sys.stderr)
        return 2
    except FingerprintMismatch as exc:
        print(f"dramflip: fingerprint mismatch: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"dramflip: error: {exc}", file=sys.stderr)
        return 1
    write_manifest(args, outputs, inputs, started)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
