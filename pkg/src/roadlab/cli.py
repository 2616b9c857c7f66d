"""Command-line entry point: ``roadlab <subcommand> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 numeric or simulation fault.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import DataError, NumericFault, RoadlabError, UsageError
from .numerics import derive_seed

log = logging.getLogger("roadlab")

CHANNEL_CHOICES = ("three", "intensity", "depth", "ambient")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="PATH", help="key=value config file (section.key=value lines)")
    p.add_argument("--seed", type=int, metavar="N", help="master seed (run.seed)")
    p.add_argument("--out", metavar="DIR", help="output run directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="roadlab", description="Road-following lab: simulation, training and metric studies.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("gen-track", help="generate a procedural track")
    _common(p)
    p.add_argument("--length", type=float, metavar="M", help="track length in metres (run.length)")

    p = sub.add_parser("collect", help="record reference-driver demonstrations with frames")
    _common(p)
    p.add_argument("--tracks", type=int, metavar="N", help="number of tracks (run.tracks)")
    p.add_argument("--length", type=float, metavar="M", help="track length in metres (run.length)")

    p = sub.add_parser("train", help="train a network on collected demonstrations")
    _common(p)
    p.add_argument("--data", required=True, metavar="DIR", help="output directory of 'collect'")
    p.add_argument("--channels", choices=CHANNEL_CHOICES, help="input channels (preproc.channel_mode)")

    p = sub.add_parser("eval-off", help="off-policy evaluation on recorded logs")
    _common(p)
    p.add_argument("--checkpoint", required=True, metavar="DIR")
    p.add_argument("--data", required=True, metavar="DIR", help="a drive log or a 'collect' output directory")
    p.add_argument("--channels", choices=CHANNEL_CHOICES)
    p.add_argument("--degrade", metavar="SPEC", help="none | bgr | shift:dx,dy | noise:sigma")

    p = sub.add_parser("drive", help="closed-loop episode on one track")
    _common(p)
    p.add_argument("--checkpoint", metavar="DIR", help="network policy checkpoint")
    p.add_argument("--policy", default=None, metavar="KIND", help="reference | constant:DEG (when no checkpoint)")
    p.add_argument("--track", metavar="DIR", help="track directory; generated from the seed when omitted")
    p.add_argument("--length", type=float, metavar="M")
    p.add_argument("--channels", choices=CHANNEL_CHOICES)
    p.add_argument("--degrade", metavar="SPEC")

    p = sub.add_parser("study", help="synthetic correlation study")
    _common(p)
    p.add_argument("--tracks", type=int, metavar="N", help="evaluation tracks per condition")
    p.add_argument("--length", type=float, metavar="M", help="evaluation track length")
    p.add_argument("--channels", choices=CHANNEL_CHOICES)
    p.add_argument("--checkpoint", metavar="DIR", help="use this policy instead of training one")

    p = sub.add_parser("reproduce-table3", help="correlations from the embedded deployment fixture")
    _common(p)
    p.add_argument("--permutations", type=int, default=0, metavar="N",
                   help="also run the combined-vs-MAE resampling test with N draws")
    return parser


def _config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg.load(args.config)
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v)
    flag_keys = {"seed": "run.seed", "tracks": "run.tracks", "length": "run.length",
                 "channels": "preproc.channel_mode", "degrade": "preproc.degradation"}
    for attr, key in flag_keys.items():
        v = getattr(args, attr, None)
        if v is not None:
            cfg.set(key, str(v))
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out or Path("runs") / args.command)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(out: Path, cfg: RunConfig, rows) -> None:
    (out / "config.txt").write_text(cfg.resolved())
    text = "key,value\n" + "".join(f"{k},{_val(v)}\n" for k, v in rows)
    (out / "summary.csv").write_text(text)


def _val(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _track_seed(seed: int, i: int) -> int:
    return derive_seed(seed, 1, i) % (2 ** 32)


# --------------------------------------------------------------------------- commands


def cmd_gen_track(args, cfg: RunConfig):
    from .simulator import gen_track, save_track

    out = _out_dir(args)
    track = gen_track(cfg.seed, float(cfg.get("run.length")), cfg.track_config())
    save_track(track, out)
    kappa = track.measured_curvature()
    _finish(out, cfg, [("seed", cfg.seed), ("points", track.n), ("length_m", track.length),
                       ("max_abs_curvature", float(np.max(np.abs(kappa))) if len(kappa) else 0.0)])
    print(f"track with {track.n} points written to {out}")


def cmd_collect(args, cfg: RunConfig):
    from .datalog import save_drivelog
    from .simulator import gen_track, save_track
    from .study import collect

    out = _out_dir(args)
    sim = cfg.sim_config()
    rows = []
    for i in range(int(cfg.get("run.tracks"))):
        track = gen_track(_track_seed(cfg.seed, i), float(cfg.get("run.length")), cfg.track_config())
        save_track(track, out / "tracks" / f"{i:03d}")
        lg = collect(track, sim, derive_seed(cfg.seed, 1, i, 0))
        save_drivelog(lg, out / "logs" / f"{i:03d}")
        rows += [(f"log{i:03d}_frames", len(lg.frames)), (f"log{i:03d}_distance_m", lg.distance),
                 (f"log{i:03d}_interventions", len(lg.interventions))]
        log.info("collected track %d: %d frames", i, len(lg.frames))
    _finish(out, cfg, rows)
    print(f"{len(rows) // 3} demonstration logs written to {out}")


def _log_dirs(data: Path) -> list:
    if (data / "meta.txt").is_file() and (data / "steering_eff.csv").is_file():
        return [data]
    logs = data / "logs"
    dirs = sorted(p for p in logs.iterdir() if p.is_dir()) if logs.is_dir() else []
    if not dirs:
        raise DataError(f"no drive logs found under {data}")
    return dirs


def cmd_train(args, cfg: RunConfig):
    from .datalog import load_drivelog
    from .pilotnet import NetworkConfig, save_checkpoint
    from .study import logs_to_dataset
    from .trainer import train, write_history

    out = _out_dir(args)
    pre = cfg.preproc_config()
    logs = [load_drivelog(d) for d in _log_dirs(Path(args.data))]
    if len(logs) >= 2:
        train_set, val_set = logs_to_dataset(logs[:-1], pre), logs_to_dataset(logs[-1:], pre)
    else:
        full = logs_to_dataset(logs, pre)
        cut = max(1, int(round(0.8 * len(full))))
        from .trainer import Dataset
        train_set = Dataset(full.inputs[:cut], full.targets[:cut])
        val_set = Dataset(full.inputs[cut:], full.targets[cut:])
    net_cfg = NetworkConfig(channels=pre.channels, output_scale=float(cfg.get("net.output_scale")))
    params, history = train(train_set, val_set, net_cfg, cfg.train_config())
    save_checkpoint(params, out / "checkpoint")
    write_history(history, out / "history.csv")
    best = min(history, key=lambda r: (r[2], r[0]))
    _finish(out, cfg, [("train_samples", len(train_set)), ("val_samples", len(val_set)),
                       ("epochs_run", len(history)), ("best_epoch", best[0]), ("best_val_mae", best[2])])
    print(f"best epoch {best[0]} val MAE {best[2]:.4f}; checkpoint in {out / 'checkpoint'}")


def cmd_eval_off(args, cfg: RunConfig):
    from .datalog import load_drivelog
    from .numerics import Rng
    from .pilotnet import load_checkpoint
    from .study import off_policy_eval_pooled

    params = load_checkpoint(args.checkpoint)
    logs = [load_drivelog(d) for d in _log_dirs(Path(args.data))]
    out = _out_dir(args)
    mae, w = off_policy_eval_pooled(params, logs, cfg.preproc_config(), Rng(cfg.seed))
    _finish(out, cfg, [("logs", len(logs)), ("frames", sum(len(lg.frames) for lg in logs)),
                       ("mae_steer", mae), ("w_off_policy", w)])
    print(f"mae_steer {mae:.4f} deg, w_off_policy {w:.4f} deg/s")


def cmd_drive(args, cfg: RunConfig):
    from dataclasses import replace

    from .datalog import save_drivelog
    from .metrics import summarize_on_policy
    from .pilotnet import load_checkpoint
    from .simulator import (ConstantPolicy, NetworkPolicy, ReferencePolicy, gen_track, load_track, run_episode,
                            save_track)

    sim = cfg.sim_config()
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint)
        pre = cfg.preproc_config()
        if params.cfg.channels != pre.channels:
            raise UsageError(f"checkpoint takes {params.cfg.channels} channels but --channels gives {pre.channels}")
        policy = NetworkPolicy(params, pre, "network")
    else:
        kind = args.policy or "reference"
        if kind == "reference":
            policy = ReferencePolicy(sim)
        elif kind.startswith("constant:"):
            try:
                policy = ConstantPolicy(float(kind.split(":", 1)[1]))
            except ValueError:
                raise UsageError(f"bad constant policy {kind!r}") from None
        else:
            raise UsageError(f"unknown policy {kind!r}; use reference, constant:DEG or --checkpoint")
    if args.track:
        track = load_track(args.track)
    else:
        track = gen_track(_track_seed(cfg.seed, 0), float(cfg.get("run.length")), cfg.track_config())
    out = _out_dir(args)
    save_track(track, out / "track")
    lg = run_episode(policy, track, sim, derive_seed(cfg.seed, 3, 0))
    save_drivelog(lg, out / "log")
    ref_cfg = replace(sim, speed_fraction=1.0)
    human = run_episode(ReferencePolicy(ref_cfg), track, ref_cfg, 0).trajectory[:, 1:3]
    rows = [("policy", policy.name), ("ticks", len(lg.steering_cmd))]
    if "fault" in lg.meta:
        _finish(out, cfg, rows + [("fault", lg.meta["fault"])])
        raise NumericFault(f"episode aborted: {lg.meta['fault']}")
    s = summarize_on_policy([lg], [human], sim.dt_policy)
    rows += [("distance_m", s.distance), ("interventions", s.interventions), ("dpi_m", s.dpi),
             ("mae_trajectory_m", s.mae_trajectory), ("failure_rate", s.failure_rate),
             ("w_on_policy", s.w_on_policy), ("w_effective", s.w_effective)]
    _finish(out, cfg, rows)
    print(f"{s.distance:.1f} m, {s.interventions} interventions, DpI {s.dpi:.1f} m")


def cmd_study(args, cfg: RunConfig):
    from .pilotnet import load_checkpoint
    from .study import default_conditions, run_study, summary_rows, write_study_outputs

    scfg = cfg.study_config()
    policies = {"base": load_checkpoint(args.checkpoint)} if args.checkpoint else None
    out = _out_dir(args)
    result = run_study(default_conditions(), scfg, cfg.sim_config(), cfg.track_config(), policies)
    write_study_outputs(result, scfg, out)
    _finish(out, cfg, summary_rows(result))
    if result.table is not None:
        for k, v in result.table.rows():
            print(f"{k:16s} {v:+.4f}")
    for name, why in result.faulted:
        print(f"faulted: {name}: {why}")


def cmd_table3(args, cfg: RunConfig):
    from .datalog import load_table8_fixture, record_columns
    from .metrics import combined_score, pearson, permutation_test_corr_diff
    from .study import reproduce_table3

    table = reproduce_table3()
    for k, v in table.rows():
        print(f"{k:16s} {v:+.4f}")
    cols = record_columns(load_table8_fixture())
    recomputed = pearson(cols["dpi"], combined_score(cols["mae_steer"], cols["w_off_policy"]))
    print(f"{'combined (recomputed z-sum)':16s} {recomputed:+.4f}")
    rows = [(f"r_{k}", v) for k, v in table.rows()] + [("r_combined_recomputed", recomputed)]
    if args.permutations:
        res = permutation_test_corr_diff(cols["combined"], cols["mae_steer"], cols["dpi"], args.permutations,
                                         cfg.seed)
        print(f"resampling test ({res.method}): mean effect {res.mean_effect:+.4f}, p {res.p_value:.4f}")
        rows += [("perm_mean_effect", res.mean_effect), ("perm_p", res.p_value)]
    if args.out:
        out = _out_dir(args)
        table.to_csv(out / "correlations.csv")
        _finish(out, cfg, rows)


COMMANDS = {"gen-track": cmd_gen_track, "collect": cmd_collect, "train": cmd_train, "eval-off": cmd_eval_off,
            "drive": cmd_drive, "study": cmd_study, "reproduce-table3": cmd_table3}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help()
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
        return 0
    except RoadlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
