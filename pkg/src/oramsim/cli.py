"""Command-line front end.

    oramsim run --protocol palermo --workload rand --n 20000 --seed 7 --report out.json
    oramsim sweep cols-sweep --workload rand --n 5000

Settings come from, in decreasing precedence: command-line flags, the
``--config`` file, built-in defaults.  The config file is INI style with
one section per module::

    [oram]
    z = 16
    s = 27
    a = 20
    [dram]
    channels = 4
    [mesh]
    cols = 8
    [run]
    protocol = palermo
    workload = rand
    n = 10000

Exit codes: 0 ok, 1 usage error, 2 protocol violation, 3 deadlock.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import sys
from dataclasses import dataclass, field

from .analysis import RunReport, build_report, write_report, write_timeseries
from .config import ZSA_SWEEP, DramConfig, IssuePolicy, MeshConfig, OramConfig, SimOptions
from .errors import DeadlockError, InsufficientSamples, OramError, TraceParseError
from .sim import PROTOCOLS, SERIAL, Simulation
from .workloads import generate, ingest

EXIT_OK, EXIT_USAGE, EXIT_VIOLATION, EXIT_DEADLOCK = 0, 1, 2, 3

DEFAULT_LINES = 1 << 20          # 64 MB of 64-byte lines
SECURITY_RATE = 2.0              # requests per 1000 cycles for constant-rate runs
WORKLOADS = ("stream", "rand", "zipf")
PRESETS = ("zsa-sweep", "cols-sweep", "prefetch-sweep", "baseline-compare")
COLS_SWEEP = (1, 2, 4, 8, 16, 32)
PREFETCH_SWEEP = (1, 2, 4, 8)
BASELINES = ("pathoram", "ringoram", "proram", "palermo-sw", "palermo")


class UsageError(Exception):
    pass


@dataclass
class ExperimentSpec:
    protocol: str = "palermo"
    workload: str = "rand"
    trace: str | None = None
    n: int = 10000
    seed: int = 1
    lines: int = DEFAULT_LINES
    cols: int | None = None
    skew: float = 0.99
    group_len: int = 4
    stash_threshold: int = 1024
    security: bool = False
    rate: float | None = None
    oram: dict = field(default_factory=dict)
    dram: dict = field(default_factory=dict)
    mesh: dict = field(default_factory=dict)

    def options(self) -> SimOptions:
        try:
            oram = OramConfig(**self.oram)
            dram = DramConfig(**self.dram)
            mesh = MeshConfig(**self.mesh)
        except (TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from exc
        rate = self.rate
        if self.security and rate is None:
            rate = SECURITY_RATE
        return SimOptions(oram, dram, mesh, IssuePolicy(rate, pad_with_dummies=self.security))

    def describe(self) -> dict:
        d = dataclasses.asdict(self)
        d["oram"] = dict(sorted(self.oram.items()))
        d["dram"] = dict(sorted(self.dram.items()))
        d["mesh"] = dict(sorted(self.mesh.items()))
        return d

    def validate(self):
        if self.protocol not in PROTOCOLS:
            raise UsageError(f"unknown protocol {self.protocol!r}; choose from {', '.join(PROTOCOLS)}")
        if self.trace is None and self.workload not in WORKLOADS:
            raise UsageError(f"unknown workload {self.workload!r}; choose from {', '.join(WORKLOADS)}")
        if self.protocol in SERIAL and self.cols not in (None, 1):
            raise UsageError(f"{self.protocol} is serialized and cannot run on a {self.cols}-column mesh")
        if self.cols is not None and self.cols < 1:
            raise UsageError("--cols must be >= 1")
        if self.n < 0 or self.lines < 1:
            raise UsageError("--n must be >= 0 and --lines >= 1")
        if self.security and self.protocol not in ("palermo", "palermo-sw"):
            raise UsageError("--security needs a concurrent protocol (palermo, palermo-sw)")
        self.options()


def run_experiment(spec: ExperimentSpec) -> tuple[RunReport, Simulation]:
    """Build the trace, run the simulation and summarise it."""
    spec.validate()
    opts = spec.options()
    if spec.trace is not None:
        trace = ingest(spec.trace, spec.lines)
        workload = f"trace:{spec.trace}"
    else:
        trace = generate(spec.workload, spec.n, spec.seed, spec.lines, spec.skew)
        workload = spec.workload
    sim = Simulation(spec.protocol, trace, spec.lines, opts, seed=spec.seed, cols=spec.cols,
                     group_len=spec.group_len, stash_threshold=spec.stash_threshold,
                     record_results=False)
    log = sim.run()
    report = build_report(sim, log, workload, spec.seed, spec.describe(), security=spec.security)
    return report, sim


# -- argument handling --------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


# flag -> (section, key, type)
_OVERRIDES = {
    "z": ("oram", "z", int), "s": ("oram", "s", int), "a": ("oram", "a", int),
    "depth": ("oram", "depth", int), "levels": ("oram", "levels", int),
    "prefetch": ("oram", "prefetch_len", int), "stash_capacity": ("oram", "stash_capacity", int),
    "channels": ("dram", "channels", int), "treetop_levels": ("mesh", "treetop_levels", int),
}
_RUN_KEYS = {
    "protocol": str, "workload": str, "trace": str, "n": int, "seed": int, "lines": int,
    "cols": int, "skew": float, "group_len": int, "stash_threshold": int, "rate": float,
    "security": bool,
}
_SECTION_TYPES = {"oram": OramConfig, "dram": DramConfig, "mesh": MeshConfig}


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI file with [oram] [dram] [mesh] [run] sections")
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.add_argument("--workload", choices=WORKLOADS)
    p.add_argument("--trace", help="trace file, one 'R|W 0x<addr>' per line")
    p.add_argument("--n", type=int, help="trace length for generated workloads")
    p.add_argument("--seed", type=int)
    p.add_argument("--lines", type=int, help="protected space in 64-byte lines (default 2^20)")
    p.add_argument("--z", type=int)
    p.add_argument("--s", type=int)
    p.add_argument("--a", type=int)
    p.add_argument("--depth", type=int, help="data tree depth (default: derived from --lines)")
    p.add_argument("--levels", type=int, help="number of ORAM trees including the data tree")
    p.add_argument("--cols", type=int, help="mesh columns (concurrent protocols only)")
    p.add_argument("--prefetch", type=int, help="cache lines per data block")
    p.add_argument("--channels", type=int)
    p.add_argument("--treetop-levels", type=int, dest="treetop_levels")
    p.add_argument("--stash-capacity", type=int, dest="stash_capacity")
    p.add_argument("--group-len", type=int, dest="group_len", help="PrORAM prefetch group")
    p.add_argument("--stash-threshold", type=int, dest="stash_threshold",
                   help="PrORAM background-eviction threshold")
    p.add_argument("--skew", type=float, help="zipf skew")
    p.add_argument("--rate", type=float, help="constant issue rate, requests per 1000 cycles")
    p.add_argument("--security", action="store_true", default=None,
                   help="constant-rate padded issue plus the latency side-channel report")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--timeseries-dir", dest="timeseries_dir", help="write stash CSV time series here")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="oramsim", description="Tree-ORAM protocol and controller simulator")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    r = sub.add_parser("run", help="run one experiment")
    _common(r)
    s = sub.add_parser("sweep", help="run a preset family of experiments")
    s.add_argument("preset", choices=PRESETS)
    _common(s)
    return p


def _coerce(section: str, key: str, raw: str):
    if section == "run":
        typ = _RUN_KEYS.get(key)
        if typ is None:
            raise UsageError(f"unknown key {key!r} in [run]")
    else:
        fields = {f.name: f for f in dataclasses.fields(_SECTION_TYPES[section])}
        if key not in fields:
            raise UsageError(f"unknown key {key!r} in [{section}]")
        default = fields[key].default
        typ = type(default) if default is not None and default is not dataclasses.MISSING else int
    try:
        if typ is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return typ(raw)
    except ValueError as exc:
        raise UsageError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def load_config(path: str) -> dict:
    cp = configparser.ConfigParser()
    try:
        with open(path) as f:
            cp.read_file(f)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise UsageError(f"bad config {path}: {exc}") from exc
    out = {}
    for section in cp.sections():
        if section not in ("run", "oram", "dram", "mesh"):
            raise UsageError(f"unknown config section [{section}]")
        out[section] = {k: _coerce(section, k, v) for k, v in cp.items(section)}
    return out


def spec_from_args(args) -> ExperimentSpec:
    """Merge built-in defaults, the config file and flags (flags win)."""
    spec = ExperimentSpec()
    if args.config:
        cfg = load_config(args.config)
        for k, v in cfg.get("run", {}).items():
            setattr(spec, k, v)
        for section in ("oram", "dram", "mesh"):
            getattr(spec, section).update(cfg.get(section, {}))
        if "cols" in spec.mesh and "cols" not in cfg.get("run", {}):
            spec.cols = spec.mesh.pop("cols")
    for key in _RUN_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            setattr(spec, key, v)
    for flag, (section, key, _) in _OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            getattr(spec, section)[key] = v
    if "channels" in spec.dram and "peak_bw" not in spec.dram:
        # keep the per-channel pin bandwidth when only the channel count changes
        spec.dram["peak_bw"] = spec.dram["channels"] * DramConfig().channel_bw
    if spec.protocol in SERIAL and spec.cols == 1:
        spec.cols = None
    return spec


def _configured(args, section: str, key: str) -> bool:
    if getattr(args, key, None) is not None:
        return True
    return bool(args.config) and key in load_config(args.config).get(section, {})


def _emit(report: RunReport, args, stem: str | None = None):
    if args.timeseries_dir:
        write_timeseries(report, args.timeseries_dir, stem)


def _summary_line(report: RunReport) -> str:
    return (f"{report.protocol:10s} cols={report.cols:<3d} records={report.trace_records} "
            f"throughput={report.throughput:.4g}/s util={report.utilization:.3f} "
            f"outstanding={report.avg_outstanding:.1f} dummy={report.dummy_fraction:.3f} "
            f"stash_max={report.stash_max}")


def cmd_run(args) -> int:
    spec = spec_from_args(args)
    report, _ = run_experiment(spec)
    if args.report:
        write_report(report, args.report)
    _emit(report, args)
    print(_summary_line(report))
    if report.security:
        sec = report.security
        print(f"security: M={sec['mutual_information']:.4f} bits p1={sec['p1']:.3f} "
              f"p2={sec['p2']:.3f} leaf_p={sec['leaf_p_value']:.3f}")
    return EXIT_OK


def sweep_specs(preset: str, base: ExperimentSpec) -> list[tuple[str, ExperimentSpec]]:
    out = []

    def variant(label, **kw):
        spec = dataclasses.replace(base, oram=dict(base.oram), dram=dict(base.dram), mesh=dict(base.mesh))
        for k, v in kw.items():
            if k in ("z", "s", "a", "prefetch_len"):
                spec.oram[k] = v
            else:
                setattr(spec, k, v)
        out.append((label, spec))

    if preset == "zsa-sweep":
        for z, s, a in ZSA_SWEEP:
            variant(f"zsa={z},{s},{a}", z=z, s=s, a=a)
    elif preset == "cols-sweep":
        for c in COLS_SWEEP:
            variant(f"cols={c}", protocol="palermo", cols=c)
    elif preset == "prefetch-sweep":
        for k in PREFETCH_SWEEP:
            variant(f"prefetch={k}", protocol="palermo", prefetch_len=k)
    elif preset == "baseline-compare":
        for proto in BASELINES:
            variant(proto, protocol=proto, cols=None if proto in SERIAL else base.cols)
    else:
        raise UsageError(f"unknown preset {preset!r}")
    return out


def run_sweep(preset: str, base: ExperimentSpec) -> list[tuple[str, RunReport]]:
    rows = []
    for label, spec in sweep_specs(preset, base):
        report, _ = run_experiment(spec)
        rows.append((label, report))
    return rows


def format_table(rows) -> str:
    head = ["point", "protocol", "cols", "throughput", "rel", "utilization", "outstanding",
            "dummy_fraction", "stash_max"]
    base = rows[0][1].throughput if rows and rows[0][1].throughput else 1.0
    lines = ["\t".join(head)]
    for label, r in rows:
        lines.append("\t".join([label, r.protocol, str(r.cols), f"{r.throughput:.6g}",
                                f"{r.throughput / base:.3f}", f"{r.utilization:.4f}",
                                f"{r.avg_outstanding:.2f}", f"{r.dummy_fraction:.4f}", str(r.stash_max)]))
    return "\n".join(lines) + "\n"


def cmd_sweep(args) -> int:
    base = spec_from_args(args)
    if args.preset == "prefetch-sweep" and base.trace is None and not _configured(args, "run", "workload"):
        base.workload = "stream"
    rows = run_sweep(args.preset, base)
    table = format_table(rows)
    sys.stdout.write(table)
    if args.report:
        with open(args.report, "w") as f:
            json.dump({"preset": args.preset, "rows": [{"point": lbl, "report": r.to_dict()} for lbl, r in rows]},
                      f, sort_keys=True, indent=2)
            f.write("\n")
    for label, r in rows:
        _emit(r, args, f"{args.preset}_{label.replace('=', '').replace(',', '_')}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        return cmd_sweep(args)
    except (UsageError, TraceParseError, InsufficientSamples, ValueError) as exc:
        print(f"oramsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DeadlockError as exc:
        print(f"oramsim: deadlock: {exc}", file=sys.stderr)
        if exc.snapshot:
            print(json.dumps(exc.snapshot, sort_keys=True), file=sys.stderr)
        return EXIT_DEADLOCK
    except OramError as exc:
        print(f"oramsim: protocol violation: {exc}", file=sys.stderr)
        return EXIT_VIOLATION


if __name__ == "__main__":
    sys.exit(main())
