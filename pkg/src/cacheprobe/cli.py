"""``cacheprobe`` command line.

Every command reads an :class:`ExperimentConfig` (``--config``), works in an
output directory (``--out``), and writes a ``<command>.manifest.json`` with
the effective configuration and SHA-256 hashes of everything it read and
wrote. Typical recipe::

    cacheprobe synth    --out run
    cacheprobe simulate --out run
    cacheprobe phases   --out run
    cacheprobe train    --out run
    cacheprobe probe pca --out run
    cacheprobe plot     --out run

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal contract
violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import cachesim, phases, plotting, probe, streams, synth
from .cachesim import CacheConfig, ContractViolation
from .config import ConfigError, ExperimentConfig, load_config
from .model import (ModelConfig, ModelError, load_checkpoint, model_policy,
                    record_activations, save_checkpoint, train_imitation)
from .trace import Trace, TraceError, read_phases, read_stream_records, read_trace, \
    write_phases, write_stream_records, write_trace

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONTRACT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class MissingArtifact(Exception):
    def __init__(self, path: Path, command: str):
        super().__init__(f"missing {path}; run `cacheprobe {command}` first")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """State shared by one command invocation: config, paths, manifest."""

    def __init__(self, command: str, cfg: ExperimentConfig, out: Path, trace_path: str | None):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.trace_path = trace_path or cfg.trace or None
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        self.notes: dict = {}
        out.mkdir(parents=True, exist_ok=True)
        self._trace = None

    # inputs ----------------------------------------------------------------

    def read(self, path: Path | str) -> Path:
        path = Path(path)
        # artifacts inside the output directory are keyed by name so manifests
        # do not depend on where the run lives
        key = path.name if path.parent.resolve() == self.out.resolve() else str(path)
        self.inputs[key] = _sha256(path)
        return path

    def require(self, name: str, command: str) -> Path:
        path = self.out / name
        if not path.exists():
            raise MissingArtifact(path, command)
        return self.read(path)

    def optional(self, name: str) -> Path | None:
        path = self.out / name
        return self.read(path) if path.exists() else None

    def trace(self) -> Trace:
        if self._trace is None:
            if self.trace_path:
                self._trace = read_trace(self.read(self.trace_path), self.cfg.line_size)
            else:
                self._trace, _, _ = synth.generate_synthetic(self.synth_spec())
        return self._trace

    def synth_spec(self) -> synth.SyntheticSpec:
        name = self.cfg.synth
        if name in synth.STOCK_SPECS:
            spec = synth.STOCK_SPECS[name](self.cfg.seed)
        else:
            spec = synth.load_spec(self.read(name))
        if spec.line_size != self.cfg.line_size:
            spec = synth.SyntheticSpec(spec.segments, spec.seed, self.cfg.line_size, spec.disjoint)
        return spec

    def cache(self) -> CacheConfig:
        return CacheConfig(self.cfg.cache_lines, self.cfg.associativity, self.cfg.line_size)

    def model_config(self) -> ModelConfig:
        c = self.cfg
        return ModelConfig(d_e=c.d_e, d_h=c.d_h, window=c.window, optimizer=c.optimizer,
                           lr=c.lr, momentum=c.momentum, epochs=c.epochs,
                           batch_size=c.batch_size, seed=c.seed)

    def labels(self, trace: Trace) -> np.ndarray:
        labels = read_phases(self.require("phases.phases", "phases"))
        if len(labels) != len(trace):
            raise TraceError(f"phases.phases has {len(labels)} labels but the trace has "
                             f"{len(trace)} accesses; rerun `cacheprobe phases`")
        return labels

    # outputs ---------------------------------------------------------------

    def path(self, name: str) -> Path:
        path = self.out / name
        self.outputs.append(path)
        return path

    def finish(self) -> None:
        manifest = {
            "command": self.command,
            "config": {k: v for k, v in vars(self.cfg).items()},
            "trace": self.trace_path or f"synthetic:{self.cfg.synth}",
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": {p.name: _sha256(p) for p in sorted(set(self.outputs))},
            **({"results": self.notes} if self.notes else {}),
        }
        name = self.command.replace(" ", "-")
        with open(self.out / f"{name}.manifest.json", "w", encoding="utf-8", newline="\n") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")


# commands -------------------------------------------------------------------

def cmd_synth(run: Run, args) -> None:
    spec = run.synth_spec()
    trace, labels, planted = synth.generate_synthetic(spec)
    write_trace(run.path("trace.csv"), trace)
    write_phases(run.path("trace.phases"), labels.labels)
    write_stream_records(run.path("trace.streams"), [s.record() for s in planted])
    synth.save_spec(run.path("synth_spec.json"), spec)
    run.notes = {"accesses": len(trace), "phases": labels.num_phases, "streams": len(planted)}
    print(f"wrote {len(trace)} accesses, {labels.num_phases} phases, "
          f"{len(planted)} streams to {run.out}")


def _phase_labels_for_policy(run: Run, trace: Trace) -> np.ndarray:
    # reuse phases.phases when it describes this trace, else find phases inline
    path = run.optional("phases.phases")
    if path is not None:
        labels = read_phases(path)
        if len(labels) == len(trace):
            return labels
    c = run.cfg
    return phases.find_phases(trace, c.slice_len, c.merge_threshold, c.global_threshold,
                              c.dpc_weight).labels


def simulate_policies(run: Run, trace: Trace, names: list[str], prefix: str = "sim"):
    cache = run.cache()
    results = {}
    for name in names:
        if name == "belady":
            policy = cachesim.policy_belady(trace)
        elif name == "lru":
            policy = cachesim.policy_lru()
        elif name == "phase":
            labels = _phase_labels_for_policy(run, trace)
            table = phases.phase_frequency_table(trace, labels)
            policy = cachesim.policy_phase_freq(labels, table)
        else:
            policy = model_policy(load_checkpoint(run.require("model.ckpt", "train")))
        result = cachesim.simulate(trace, cache, policy)
        cachesim.write_result(run.path(f"{prefix}_{name}.csv").with_suffix(""), trace, result)
        run.outputs.append(run.out / f"{prefix}_{name}.json")
        results[name] = result
    return results


def _write_summary(run: Run, tables: dict[str, dict]) -> None:
    # one row per trace, one hit-rate column per policy (Belady first)
    policies = list(next(iter(tables.values())))
    with open(run.path("summary.csv"), "w", encoding="utf-8", newline="\n") as f:
        f.write("trace,accesses," + ",".join(policies) + "\n")
        for name, results in tables.items():
            n = len(next(iter(results.values())).outcomes)
            f.write(f"{name},{n}," + ",".join(f"{results[p].hit_rate:.6f}" for p in policies)
                    + "\n")


def cmd_simulate(run: Run, args) -> None:
    names = run.cfg.policy_list()
    tables = {"original": simulate_policies(run, run.trace(), names)}
    if args.with_edited:
        path = run.out / "edited.csv"
        if not path.exists():
            raise MissingArtifact(path, "streams remove")
        edited = read_trace(run.read(path), run.cfg.line_size)
        tables["edited"] = simulate_policies(run, edited, names, prefix="sim_edited")
    _write_summary(run, tables)
    run.notes = {t: {p: r.hit_rate for p, r in res.items()} for t, res in tables.items()}
    width = max(len(p) for p in names)
    print(f"{'':<{width}}  " + "  ".join(f"{t:>8}" for t in tables))
    for p in names:
        print(f"{p:<{width}}  " + "  ".join(f"{100 * res[p].hit_rate:7.2f}%"
                                            for res in tables.values()))


def cmd_phases(run: Run, args) -> None:
    c = run.cfg
    trace = run.trace()
    features = phases.slice_features(trace, slice_len=c.slice_len)
    segments = phases.merge_neighbors(features, c.merge_threshold, c.dpc_weight)
    labeling = phases.global_cluster(segments, c.global_threshold, c.dpc_weight)
    write_phases(run.path("phases.phases"), labeling.labels)
    phases.write_histograms(run.path("phase_histograms.csv"), features)
    run.notes = {"slices": len(features), "segments": len(segments),
                 "phases": labeling.num_phases}
    truth = run.optional("trace.phases")
    if truth is not None and not (run.trace_path or c.trace):
        truth_labels = read_phases(truth)
        if len(truth_labels) == len(trace):
            run.notes["agreement_with_planted"] = phases.label_agreement(labeling, truth_labels)
    print(f"{len(features)} slices -> {len(segments)} segments -> {labeling.num_phases} phases")
    if "agreement_with_planted" in run.notes:
        print(f"agreement with planted phases: {100 * run.notes['agreement_with_planted']:.2f}%")


def _streams(run: Run, trace: Trace) -> list[streams.Stream]:
    path = run.optional("streams.streams")
    if path is not None:
        return streams.streams_from_records(trace, read_stream_records(path))
    return streams.detect_streams(trace, run.cfg.min_length, run.cfg.max_gap)


def _selected_stream(run: Run, found):
    c = run.cfg
    if c.stream_id >= 0:
        return streams.select_stream(found, stream_id=c.stream_id)
    if c.stream_base >= 0:
        return streams.select_stream(found, base=c.stream_base,
                                     stride=c.stream_stride or None)
    raise UsageError("select a stream with --id or --base [--stride]")


def cmd_streams(run: Run, args) -> None:
    trace = run.trace()
    if args.action == "detect":
        found = streams.detect_streams(trace, run.cfg.min_length, run.cfg.max_gap)
        write_stream_records(run.path("streams.streams"), [s.record() for s in found])
        with open(run.path("streams_report.csv"), "w", encoding="utf-8", newline="\n") as f:
            f.write("id,start_index,end_index,base,stride,members,pcs\n")
            for i, s in enumerate(found):
                pcs = " ".join(f"{pc:#x}" for pc in streams.member_pcs(trace, s))
                f.write(f"{i},{s.span[0]},{s.span[1]},{s.base:#x},{s.stride},{len(s)},{pcs}\n")
        run.notes = {"streams": len(found)}
        for i, s in enumerate(found):
            print(f"[{i}] base={s.base:#x} stride={s.stride} members={len(s)} "
                  f"span={s.span[0]}..{s.span[1]}")
        return
    stream = _selected_stream(run, _streams(run, trace))
    if args.action == "remove":
        edited, index_map = streams.remove_stream(trace, stream)
    else:
        edited, index_map = streams.keep_stream_suffix(trace, stream, run.cfg.fraction)
    write_trace(run.path("edited.csv"), edited)
    streams.write_index_map(run.path("edited.map.csv"), index_map)
    run.notes = {"removed": len(trace) - len(edited), "base": stream.base,
                 "stride": stream.stride}
    print(f"edited trace: {len(edited)} accesses ({len(trace) - len(edited)} removed)")


def cmd_train(run: Run, args) -> None:
    trace = run.trace()
    model, curve = train_imitation(trace, run.cache(), run.model_config())
    save_checkpoint(run.path("model.ckpt"), model)
    with open(run.path("training_curve.csv"), "w", encoding="utf-8", newline="\n") as f:
        f.write("epoch,loss,accuracy\n")
        f.write(f"0,{curve.initial_loss:.17g},\n")
        for e, (loss, acc) in enumerate(zip(curve.epoch_loss, curve.epoch_accuracy), start=1):
            f.write(f"{e},{loss:.17g},{acc:.17g}\n")
    run.notes = {"decisions": curve.decisions, "final_loss": curve.epoch_loss[-1],
                 "final_accuracy": curve.epoch_accuracy[-1]}
    print(f"{curve.decisions} Belady decisions; final loss {curve.epoch_loss[-1]:.4f}, "
          f"victim agreement {100 * curve.epoch_accuracy[-1]:.2f}%")


def _hidden_pca(run: Run, model, trace: Trace, prefix: str):
    acts = record_activations(model, trace, run.cache())
    result = probe.pca(probe.ActivationRecord(acts.hidden), min(run.cfg.pca_k, model.config.d_h))
    probe.write_projections(run.path(f"{prefix}_pca.csv"), result)
    probe.write_explained_variance(run.path(f"{prefix}_variance.csv"), result)
    return acts, result


def cmd_probe(run: Run, args) -> None:
    trace = run.trace()
    model = load_checkpoint(run.require("model.ckpt", "train"))
    if args.action == "pca":
        acts, result = _hidden_pca(run, model, trace, "hidden")
        cachesim.write_result(run.path("sim_model.csv").with_suffix(""), trace, acts.sim)
        run.outputs.append(run.out / "sim_model.json")
        run.notes = {"explained_variance_ratio": result.explained_variance_ratio.tolist(),
                     "model_hit_rate": acts.sim.hit_rate}
        print("explained variance:",
              " ".join(f"{r:.3f}" for r in result.explained_variance_ratio))
    elif args.action == "correlate":
        labels = run.labels(trace)
        proj = probe.read_projections(run.require("hidden_pca.csv", "probe pca"))
        report = probe.correlate_with_phases(proj, labels)
        probe.write_correlations(run.path("correlations.csv"), report)
        best = report.strongest()
        run.notes = {"strongest": best}
        if best:
            print(f"strongest: PC{best[0]} vs phase {best[1]}: r = {best[2]:+.3f}")
    elif args.action == "compare":
        edited_path = Path(args.edited) if args.edited else run.out / "edited.csv"
        map_path = Path(args.map) if args.map else run.out / "edited.map.csv"
        for p in (edited_path, map_path):
            if not p.exists():
                raise MissingArtifact(p, "streams remove")
        edited = read_trace(run.read(edited_path), run.cfg.line_size)
        index_map = streams.read_index_map(run.read(map_path))
        _, base = _hidden_pca(run, model, trace, "hidden")
        edited_model = model
        if args.retrain:
            edited_model, _ = train_imitation(edited, run.cache(), run.model_config())
        acts_e, after = _hidden_pca(run, edited_model, edited, "edited")
        cmp_pca = probe.compare_records(base.as_record(), after.as_record(), index_map)
        simulate_policies(run, edited, ["belady", "lru"], prefix="sim_edited")
        cachesim.write_result(run.path("sim_edited_model.csv").with_suffix(""), edited, acts_e.sim)
        run.outputs.append(run.out / "sim_edited_model.json")
        report = {
            "mode": "retrain" if args.retrain else "rerun",
            "aligned_rows": cmp_pca.rows,
            "mean_abs_difference": cmp_pca.mean_abs_difference,
            "per_component": cmp_pca.per_component.tolist(),
            "sign_flipped_components": cmp_pca.flipped,
        }
        with open(run.path("compare.json"), "w", encoding="utf-8", newline="\n") as f:
            json.dump(report, f, indent=2, sort_keys=True)
            f.write("\n")
        run.notes = report
        print(f"mean abs. difference of top-{base.projections.shape[1]} PCs: "
              f"{cmp_pca.mean_abs_difference:.4f} over {cmp_pca.rows} aligned accesses")
    else:  # embeddings
        acts = record_activations(model, trace, run.cache())
        result, table = probe.embedding_report(acts.address_embeddings, acts.line_ids,
                                               trace.lines(), acts.sim.outcomes,
                                               run.cfg.embedding_k)
        k = result.projections.shape[1]
        with open(run.path("embeddings.csv"), "w", encoding="utf-8", newline="\n") as f:
            f.write("line,accesses,hits,hit_rate," + ",".join(f"pc{c}" for c in range(k)) + "\n")
            for r in table:
                line = "oov" if r.line < 0 else f"{r.line:#x}"
                f.write(f"{line},{r.accesses},{r.hits},{r.hit_rate:.6f},"
                        + ",".join(f"{v:.17g}" for v in r.projections) + "\n")
        run.notes = {"lines": len(table),
                     "explained_variance_ratio": result.explained_variance_ratio.tolist()}
        print(f"{len(table)} lines; embedding PCA variance:",
              " ".join(f"{r:.3f}" for r in result.explained_variance_ratio))


def _rates(run: Run, prefix: str) -> dict[str, np.ndarray]:
    rates = {}
    for name in ("belady", "lru", "phase", "model"):
        path = run.optional(f"{prefix}_{name}.csv")
        if path is not None:
            _, _, hits = cachesim.read_result_csv(path)
            rates[name] = cachesim.rolling_hit_rate(hits, run.cfg.rolling_window)
    return rates


def cmd_plot(run: Run, args) -> None:
    made = []
    policy = args.policy
    candidates = [policy] if policy else ["model", "belady", "lru", "phase"]
    sim_path = next((run.out / f"sim_{p}.csv" for p in candidates
                     if (run.out / f"sim_{p}.csv").exists()), None)
    if sim_path is None:
        raise MissingArtifact(run.out / f"sim_{candidates[0]}.csv", "simulate")
    _, addresses, hits = cachesim.read_result_csv(run.read(sim_path))
    rolling = cachesim.rolling_hit_rate(hits, run.cfg.rolling_window)
    name = sim_path.stem[len("sim_"):]
    plotting.access_scatter(run.path("access.svg"), addresses, hits, rolling,
                            title=f"{name}: hit rate {100 * hits.mean():.1f}%")
    made.append("access.svg")

    labels_path = run.optional("phases.phases")
    labels = read_phases(labels_path) if labels_path else None
    if labels is not None and len(labels) != len(addresses):
        labels = None
    pca_path = run.optional("hidden_pca.csv")
    if pca_path is not None:
        proj = probe.read_projections(pca_path)
        rates = _rates(run, "sim")
        plotting.pca_overview(run.path("overview.svg"), addresses, hits, proj, rates, labels,
                              title="hidden-state PCA")
        made.append("overview.svg")
    edited_pca = run.optional("edited_pca.csv")
    edited_sim = run.optional("sim_edited_model.csv")
    if edited_pca is not None and edited_sim is not None:
        _, e_addr, e_hits = cachesim.read_result_csv(edited_sim)
        plotting.pca_overview(run.path("edited_overview.svg"), e_addr, e_hits,
                              probe.read_projections(edited_pca), _rates(run, "sim_edited"),
                              title="hidden-state PCA, edited trace")
        made.append("edited_overview.svg")
    if labels is not None:
        truth_path = run.optional("trace.phases")
        truth = read_phases(truth_path) if truth_path else None
        if truth is not None and len(truth) != len(labels):
            truth = None
        plotting.phase_bands(run.path("phases.svg"), labels, truth)
        made.append("phases.svg")
    run.notes = {"figures": made}
    print("wrote", ", ".join(made))


# argument parsing -------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value experiment config file")
    common.add_argument("--out", default=".", help="output directory (default: .)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--trace", help="trace file (overrides config 'trace')")

    parser = _Parser(prog="cacheprobe", description=__doc__.split("\n")[0],
                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="write a synthetic trace with ground truth")
    p = sub.add_parser("simulate", parents=[common], help="run replacement policies")
    p.add_argument("--with-edited", action="store_true",
                   help="also simulate <out>/edited.csv and add it to the summary")
    sub.add_parser("phases", parents=[common], help="find program phases")
    p = sub.add_parser("streams", parents=[common], help="detect or edit streams")
    p.add_argument("action", choices=["detect", "remove", "keep-suffix"])
    p.add_argument("--id", type=int, dest="stream_id")
    p.add_argument("--base", type=lambda s: int(s, 0), dest="stream_base")
    p.add_argument("--stride", type=int, dest="stream_stride")
    p.add_argument("--fraction", type=float)
    sub.add_parser("train", parents=[common], help="imitation-train the eviction model")
    p = sub.add_parser("probe", parents=[common], help="probe model internals")
    p.add_argument("action", choices=["pca", "correlate", "compare", "embeddings"])
    p.add_argument("--edited", help="edited trace for compare (default: <out>/edited.csv)")
    p.add_argument("--map", help="index map for compare (default: <out>/edited.map.csv)")
    p.add_argument("--retrain", action="store_true",
                   help="compare: train a fresh model on the edited trace")
    p = sub.add_parser("plot", parents=[common], help="render SVG figures")
    p.add_argument("--policy", choices=["belady", "lru", "phase", "model"],
                   help="policy for the access scatter (default: model if available)")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "simulate": cmd_simulate,
    "phases": cmd_phases,
    "streams": cmd_streams,
    "train": cmd_train,
    "probe": cmd_probe,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        overrides = {k: getattr(args, k) for k in ("seed", "stream_id", "stream_base",
                                                   "stream_stride", "fraction")
                     if getattr(args, k, None) is not None}
        cfg = cfg.replace(**overrides)
        cfg.policy_list()
    except FileNotFoundError as exc:
        print(f"cacheprobe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"cacheprobe: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    name = args.command + (f" {args.action}" if hasattr(args, "action") else "")
    run = Run(name, cfg, Path(args.out), args.trace)
    try:
        COMMANDS[args.command](run, args)
        run.finish()
    except UsageError as exc:
        print(f"cacheprobe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractViolation as exc:
        print(f"cacheprobe: internal error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (MissingArtifact, TraceError, ModelError, ValueError, OSError) as exc:
        print(f"cacheprobe: {name}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
