"""Command-line harness: ``python -m accordion <command> ...``.

Exit codes: 0 ok, 2 config error, 3 infeasible request, 4 protocol or
integrity error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import sys
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import protocol, wire
from .arch import ArchSpec, DepthConfig, Scheme, build
from .data import Dataset, SpiralSpec, make_splits
from .errors import (
    ConfigError,
    InfeasibleBudgetError,
    InputError,
    IntegrityError,
    ProtocolError,
    UnreachableAccuracyError,
    VersionError,
)
from .policy import DepthPolicy, named_policy
from .profile import ProfileTable, build_table
from .train import TrainConfig, train

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_PROTOCOL = 0, 2, 3, 4


@dataclass
class ExperimentConfig:
    arch: ArchSpec = field(default_factory=ArchSpec)
    data: SpiralSpec = field(default_factory=SpiralSpec)
    policy: str = "coml-05"
    p_full: float | None = None
    epochs: int = 60
    batch_size: int = 124
    learning_rate: float = 0.01
    lr_schedule: tuple = ((30, 10.0), (45, 10.0))
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    out: str = "runs/default"

    def depth_policy(self) -> DepthPolicy:
        return named_policy(self.policy, self.arch.total_units, self.p_full)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            policy=self.depth_policy(), epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, lr_schedule=self.lr_schedule,
            momentum=self.momentum, weight_decay=self.weight_decay, seed=self.seed,
        )

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        a, d = self.arch, self.data
        cp["arch"] = {
            "input_dim": str(a.input_dim),
            "block_widths": ",".join(map(str, a.block_widths)),
            "units_per_block": str(a.units_per_block),
            "num_classes": str(a.num_classes),
            "bits_per_param": str(a.bits_per_param),
        }
        cp["train"] = {
            "epochs": str(self.epochs),
            "batch_size": str(self.batch_size),
            "learning_rate": repr(self.learning_rate),
            "lr_schedule": ",".join(f"{e}:{v!r}" for e, v in self.lr_schedule),
            "momentum": repr(self.momentum),
            "weight_decay": repr(self.weight_decay),
            "seed": str(self.seed),
        }
        p_full = "" if self.p_full is None else repr(self.p_full)
        cp["policy"] = {"name": self.policy, "p_full": p_full}
        cp["data"] = {
            "generator": "spirals",
            "num_classes": str(d.num_classes),
            "train": str(d.train),
            "val": str(d.val),
            "test": str(d.test),
            "turns": repr(d.turns),
            "jitter": repr(d.jitter),
            "label_noise": repr(d.label_noise),
            "seed": str(d.seed),
        }
        cp["output"] = {"dir": self.out}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> ExperimentConfig:
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
            base = cls()
            cfg = cls()
            if cp.has_section("arch"):
                s = cp["arch"]
                widths = s.get("block_widths", ",".join(map(str, base.arch.block_widths)))
                cfg.arch = ArchSpec(
                    input_dim=s.getint("input_dim", base.arch.input_dim),
                    block_widths=tuple(int(w) for w in widths.split(",")),
                    units_per_block=s.getint("units_per_block", base.arch.units_per_block),
                    num_classes=s.getint("num_classes", base.arch.num_classes),
                    bits_per_param=s.getint("bits_per_param", base.arch.bits_per_param),
                )
            if cp.has_section("train"):
                s = cp["train"]
                cfg.epochs = s.getint("epochs", base.epochs)
                cfg.batch_size = s.getint("batch_size", base.batch_size)
                cfg.learning_rate = s.getfloat("learning_rate", base.learning_rate)
                sched = s.get("lr_schedule", "").strip()
                cfg.lr_schedule = tuple(
                    (int(e), float(v)) for e, v in (p.split(":") for p in sched.split(",") if p)
                ) if sched else ()
                cfg.momentum = s.getfloat("momentum", base.momentum)
                cfg.weight_decay = s.getfloat("weight_decay", base.weight_decay)
                cfg.seed = s.getint("seed", base.seed)
            if cp.has_section("policy"):
                s = cp["policy"]
                cfg.policy = s.get("name", base.policy)
                pf = s.get("p_full", "").strip()
                cfg.p_full = float(pf) if pf else None
            if cp.has_section("data"):
                s = cp["data"]
                if s.get("generator", "spirals") != "spirals":
                    raise ConfigError("only the 'spirals' generator is available")
                d = base.data
                cfg.data = SpiralSpec(
                    num_classes=s.getint("num_classes", d.num_classes),
                    train=s.getint("train", d.train),
                    val=s.getint("val", d.val),
                    test=s.getint("test", d.test),
                    turns=s.getfloat("turns", d.turns),
                    jitter=s.getfloat("jitter", d.jitter),
                    label_noise=s.getfloat("label_noise", d.label_noise),
                    seed=s.getint("seed", d.seed),
                )
            if cp.has_section("output"):
                cfg.out = cp["output"].get("dir", base.out)
        except (configparser.Error, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad config file: {exc}") from None
        cfg.train_config()  # validate
        return cfg


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if getattr(args, "config", None):
        cfg = ExperimentConfig.from_text(Path(args.config).read_text())
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed  # model init and shuffling; the dataset keeps its own seed
    if getattr(args, "policy", None):
        cfg.policy = args.policy
    if getattr(args, "scheme", None) and cfg.policy != "baseline":
        tag = cfg.policy.partition("-")[2]
        cfg.policy = f"{args.scheme}-{tag}" if tag else args.scheme
    if getattr(args, "p_full", None) is not None:
        cfg.p_full = args.p_full
    if getattr(args, "out", None):
        cfg.out = args.out
    cfg.train_config()
    return cfg


def _address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise ConfigError(f"bad address {text!r}; expected host:port") from None


def _load_model(path):
    partial = wire.read_acdn(path)
    if partial.achievable_n != partial.manifest.spec.total_units:
        raise IntegrityError(f"{path} does not hold a complete model")
    return partial.model


def cmd_init_config(args) -> int:
    cfg = _load_config(args)
    Path(args.file).write_text(cfg.to_text())
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in make_splits(cfg.data).items():
        ds.save(out / f"{name}.bin")
        print(f"{out / f'{name}.bin'}: {len(ds)} samples, {ds.num_classes} classes")
    return EXIT_OK


def _datasets(cfg: ExperimentConfig, data_dir) -> dict[str, Dataset]:
    if data_dir:
        d = Path(data_dir)
        return {name: Dataset.load(d / f"{name}.bin") for name in ("train", "val", "test")}
    return make_splits(cfg.data)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data = _datasets(cfg, args.data)
    model = build(cfg.arch, cfg.seed)
    tcfg = cfg.train_config()
    report = train(model, data["train"], tcfg, data["val"])
    mbytes, chunks = wire.serialize(model, DepthConfig.full(cfg.arch, tcfg.policy.scheme))
    wire.write_acdn(out / "model.acdn", mbytes, chunks)
    report.write_csv(out / "report.csv")
    (out / "config.ini").write_text(cfg.to_text())
    last = report.epochs[-1]
    print(f"trained {cfg.policy}: {report.iterations} iterations, final loss {last.loss:.4f}, "
          f"full-model validation error {last.full_error:.4f}")
    print(f"wrote {out / 'model.acdn'} and {out / 'report.csv'}")
    return EXIT_OK


def cmd_profile(args) -> int:
    model = _load_model(args.model)
    data = Dataset.load(args.data)
    schemes = [Scheme.parse(args.scheme)] if args.scheme else list(Scheme)
    table = build_table(model, schemes, data, wire.model_id(model).hex(), str(args.data))
    table.save(args.out)
    print(f"wrote {args.out}: {len(table.entries)} entries")
    return EXIT_OK


def cmd_serve(args) -> int:
    model = _load_model(args.model)
    endpoint = protocol.Endpoint(model, ProfileTable.load(args.table))
    server = protocol.EndpointServer(_address(args.listen), endpoint)
    host, port = server.server_address[:2]
    print(f"serving model {endpoint.model_id.hex()} on {host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def _requirements(args) -> protocol.Requirements:
    if args.deadline_ms is None or args.throughput_bps is None:
        raise ConfigError("--deadline-ms and --throughput-bps are required")
    return protocol.Requirements(
        deadline_ms=args.deadline_ms, throughput_bps=args.throughput_bps,
        scheme=Scheme.parse(args.scheme or "coml"), max_error=args.max_error,
    )


def cmd_fetch(args) -> int:
    host, port = _address(args.connect)
    transport = protocol.TcpTransport(host, port)
    try:
        client = protocol.Client(transport)
        partial = client.fetch(_requirements(args))
        if args.upgrade_n is not None:
            partial = client.upgrade(target_n=args.upgrade_n)
    finally:
        transport.close()
    if args.out:
        Path(args.out).write_bytes(partial.to_bytes())
    offer = client.offer
    print(f"achievable_n={partial.achievable_n} predicted_error={offer.predicted_error:.4f} "
          f"predicted_transfer_ms={offer.predicted_transfer_ms:.3f} "
          f"accuracy_met={int(offer.accuracy_met)}")
    return EXIT_OK


def load_scenario(path) -> tuple[protocol.Endpoint, protocol.Scenario]:
    """Scenario file: ``[scenario]`` plus optional ``[upgrade.*]`` sections."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(Path(path).read_text())
        s = cp["scenario"]
        base = Path(path).parent
        model_path, table_path = base / s["model"], base / s["table"]
        link = protocol.LinkModel(s.getfloat("throughput_bps"), s.getfloat("rtt_s", 0.0))
        me = s.get("max_error", "").strip()
        req = protocol.Requirements(
            deadline_ms=s.getint("deadline_ms"),
            throughput_bps=int(s.getfloat("throughput_bps")),
            scheme=Scheme.parse(s.get("scheme", "coml")),
            max_error=float(me) if me else None,
            rtt_ms=1000 * link.rtt_s,
        )
        ups = []
        for name in sorted(n for n in cp.sections() if n.startswith("upgrade")):
            u = cp[name]
            te, tn = u.get("target_error", "").strip(), u.get("target_n", "").strip()
            ups.append(protocol.UpgradeEvent(
                u.getfloat("at_s", 0.0), float(te) if te else None, int(tn) if tn else None
            ))
    except (KeyError, configparser.Error, ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad scenario file: {exc!r}") from None
    endpoint = protocol.Endpoint(_load_model(model_path), ProfileTable.load(table_path))
    return endpoint, protocol.Scenario(link, req, tuple(ups))


def cmd_simulate(args) -> int:
    endpoint, scenario = load_scenario(args.scenario)
    session = protocol.simulate_session(endpoint, scenario)
    Path(args.out).write_text(session.to_csv())
    offer = session.offer
    done = session.events("transfer_done")
    print(f"initial n={offer.n} of {endpoint.model.spec.total_units}, "
          f"predicted_error={offer.predicted_error:.4f}, "
          f"initial transfer {done[0].time_s:.6f} s, final n={done[-1].achievable_n}")
    return EXIT_OK


CURVE_COLUMNS = ["scheme", "policy", "n", "size_bits", "error_mean", "error_std", "runs"]


def aggregate_curves(runs: list[tuple[str, ProfileTable]]) -> list[dict]:
    """Mean and sample standard deviation (ddof=1; 0 for one run) per configuration."""
    groups: dict[tuple, list] = defaultdict(list)
    sizes = {}
    for policy, table in runs:
        for e in table.entries:
            key = (e.scheme.value, policy, e.n)
            groups[key].append(e.error_rate)
            sizes[key] = e.size_bits
    rows = []
    for key in sorted(groups):
        errs = np.asarray(groups[key], dtype=np.float64)
        std = float(errs.std(ddof=1)) if errs.size > 1 else 0.0
        values = [*key, sizes[key], float(errs.mean()), std, errs.size]
        rows.append(dict(zip(CURVE_COLUMNS, values)))
    return rows


def cmd_export_curves(args) -> int:
    runs = []
    for item in args.tables:
        label, sep, path = item.partition("=")
        if not sep:
            label, path = Path(item).parent.name or "run", item
        runs.append((label, ProfileTable.load(path)))
    rows = aggregate_curves(runs)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, CURVE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "error_mean": repr(r["error_mean"]),
                        "error_std": repr(r["error_std"])})
    print(f"wrote {args.out}: {len(rows)} rows from {len(runs)} tables")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="accordion", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def exp_flags(sp):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--policy")
        sp.add_argument("--scheme", choices=[s.value for s in Scheme])
        sp.add_argument("--p-full", type=float)

    sp = sub.add_parser("init-config", help="write a config file with the desk defaults")
    exp_flags(sp)
    sp.add_argument("file")
    sp.set_defaults(func=cmd_init_config)

    sp = sub.add_parser("gen-data", help="generate the spiral train/val/test files")
    exp_flags(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model and write model.acdn + report.csv")
    exp_flags(sp)
    sp.add_argument("--data", help="directory with train/val/test .bin files")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("profile", help="build the depth look-up table")
    sp.add_argument("model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--scheme", choices=[s.value for s in Scheme])
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_profile)

    sp = sub.add_parser("serve", help="serve a model over TCP")
    sp.add_argument("model")
    sp.add_argument("table")
    sp.add_argument("--listen", default="127.0.0.1:7878")
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("fetch", help="fetch a (partial) model from a server")
    sp.add_argument("--connect", required=True)
    sp.add_argument("--deadline-ms", type=int)
    sp.add_argument("--throughput-bps", type=int)
    sp.add_argument("--max-error", type=float)
    sp.add_argument("--scheme", choices=[s.value for s in Scheme])
    sp.add_argument("--upgrade-n", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_fetch)

    sp = sub.add_parser("simulate", help="replay a session scenario on a simulated link")
    sp.add_argument("scenario")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("export-curves", help="aggregate profile tables into error curves")
    sp.add_argument("tables", nargs="+", help="[POLICY=]table.csv")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_curves)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InfeasibleBudgetError, UnreachableAccuracyError) as exc:
        print(f"infeasible request: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ProtocolError, IntegrityError, VersionError, OSError) as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
