"""Command-line entry points: offline tuning, decode runs, log analysis.

Exit codes: 0 success, 2 infeasible tuning budget, 3 artifact/model
mismatch, 4 malformed input. Summary reports are printed as ``key value``
lines so scripts can parse them; per-step records go to JSONL files.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile

import numpy as np

from .artifact import TuningArtifact
from .config import load_disk_model, load_preset, read_sections
from .errors import ArtifactMismatchError, ConfigurationError, MalformedInputError
from .runtime import RuntimeConfig, build_engine, overlap_ratio
from .toymodel import ExactDecoder, ModelDims, ToyModel
from .tuner import (
    SIGMA_LADDER,
    LookupTables,
    TunerConfig,
    build_reuse_lookup,
    build_solution_table,
    fit_projection_family,
    profile,
)
from .workload import SyntheticWorkload, gen_workload, save_workload, workload_from_parser

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_MISMATCH = 3
EXIT_MALFORMED = 4

OFFLOAD_ENV = "KVSPILL_OFFLOAD_PATH"


def _model_from_config(path) -> tuple[ModelDims, int]:
    if path is None:
        return ModelDims(), 0
    cp = read_sections(path, required=("model",))
    sec = cp["model"]
    try:
        dims = ModelDims(
            layers=sec.getint("layers", 4),
            model_dim=sec.getint("model_dim", 256),
            h_q=sec.getint("h_q", 8),
            h_kv=sec.getint("h_kv", 2),
            head_dim=sec.getint("head_dim", 32),
        )
        return dims, sec.getint("seed", 0)
    except ValueError as exc:
        raise MalformedInputError(f"bad model value in {path}: {exc}") from exc


def cmd_tune(args) -> int:
    dims, model_seed = _model_from_config(args.model_config)
    model = ToyModel(dims, seed=model_seed)
    disk = load_preset(args.preset)
    budget_bytes = int(args.max_kv_mem * (1 << 20))
    tc = TunerConfig(
        budget_max_bytes=budget_bytes,
        b_max=args.max_batch_size,
        s_max=args.max_context_len,
        s_min=min(args.s_min, args.max_context_len),
        alpha=args.alpha,
        sigma_max=args.sigma_max,
        g_max=args.g_max,
        mg_const=args.mg_const,
        s_step=min(args.s_step, max(1, args.max_context_len - min(args.s_min, args.max_context_len) + 1)),
    )
    sigmas = [s for s in SIGMA_LADDER if s <= tc.sigma_max]
    print(f"fitting projections for sigma in {sigmas} ({args.samples} sample prompts)")
    projections = fit_projection_family(model, sigmas, seed=args.seed,
                                        n_prompts=args.samples)
    entry = dims.h_kv * 2 * dims.head_dim * 2
    c_floor = tc.mg_const * entry
    capacities = [c_floor * k for k in (1, 2, 4, 8, 16)]
    ref_wl = SyntheticWorkload(seed=args.seed, context_len=min(768, tc.s_max),
                               steps=48, drift=0.2)
    ref_cfg = RuntimeConfig(group_size=8, sigma=8.0,
                            m_groups=max(1, tc.mg_const // 8),
                            reuse_capacity_bytes=capacities[0], mg_const=tc.mg_const)
    print(f"measuring reuse rates at capacities {capacities}")
    reuse = build_reuse_lookup(model, ref_wl, capacities, ref_cfg, disk,
                               samples=args.lookup_samples,
                               projections=projections[8.0 if 8.0 in projections else sigmas[-1]])
    lookup = LookupTables(reuse_rate=reuse, projections=projections)
    print("profiling delay surfaces")
    tables = profile(model, tc, lookup, disk, seed=args.seed)
    print("solving the (batch, context) sweep")
    solutions = build_solution_table(tc, tables, lookup, dims)
    feasible = [sol for sol in solutions.entries.values() if sol.feasible]
    artifact = TuningArtifact(
        dims=dims, model_seed=model_seed, mg_const=tc.mg_const, preset=args.preset,
        seed=args.seed, lookup=lookup, solutions=solutions,
        meta={"alpha": tc.alpha, "budget_max_bytes": budget_bytes,
              "b_max": tc.b_max, "s_max": tc.s_max, "s_min": tc.s_min,
              "g_max": tc.g_max, "sigma_max": tc.sigma_max})
    if not feasible:
        sample = next(iter(solutions.entries.values()))
        print("tuning infeasible:", sample.diagnostics or "no feasible point found",
              file=sys.stderr)
        return EXIT_INFEASIBLE
    artifact.save(args.out)
    print(f"artifact written to {args.out} "
          f"({len(feasible)}/{len(solutions.entries)} grid points feasible)")
    return EXIT_OK


def _build_run_engine(args, artifact: TuningArtifact, model: ToyModel,
                      wl: SyntheticWorkload, sol):
    cfg = RuntimeConfig(
        group_size=sol.g, sigma=sol.sigma, m_groups=sol.m,
        reuse_capacity_bytes=sol.c, mg_const=artifact.mg_const,
        elem_bytes=args.elem_bytes,
        reuse_enabled=not args.no_reuse,
        pipeline=not args.serialized)
    projections = artifact.lookup.projections[sol.sigma]
    max_tokens = wl.context_len + wl.steps + cfg.group_size
    if args.backend == "file":
        path = args.offload_path or os.environ.get(OFFLOAD_ENV)
        if path is None:
            path = os.path.join(tempfile.gettempdir(), "kvspill_offload.bin")
        return build_engine(model, cfg, projections, max_tokens,
                            backend="file", path=path), cfg
    preset = args.preset or artifact.preset
    disk = load_disk_model(args.disk_config) if args.disk_config else load_preset(preset)
    return build_engine(model, cfg, projections, max_tokens,
                        backend="sim", disk_model=disk), cfg


def cmd_run(args) -> int:
    artifact = TuningArtifact.load(args.config)
    cp = read_sections(args.workload, required=("workload",))
    if cp.has_section("model"):
        dims, model_seed = _model_from_config(args.workload)
    else:
        dims, model_seed = artifact.dims, artifact.model_seed
    artifact.check_model(dims, model_seed)
    model = ToyModel(dims, seed=model_seed)
    wl = workload_from_parser(cp)
    if args.seed is not None:
        wl = SyntheticWorkload(seed=args.seed, context_len=wl.context_len,
                               steps=wl.steps, drift=wl.drift,
                               locality_width=wl.locality_width,
                               query_noise=wl.query_noise)
    if args.steps is not None:
        wl = SyntheticWorkload(seed=wl.seed, context_len=wl.context_len,
                               steps=args.steps, drift=wl.drift,
                               locality_width=wl.locality_width,
                               query_noise=wl.query_noise)
    sol = artifact.solutions.query(1, wl.context_len)
    if not sol.feasible:
        print(f"no feasible tuned parameters for S={wl.context_len}: "
              f"{sol.diagnostics}", file=sys.stderr)
        return EXIT_INFEASIBLE
    engine, cfg = _build_run_engine(args, artifact, model, wl, sol)
    gen = gen_workload(wl, dims.model_dim)
    dec = ExactDecoder(model)
    dec.prefill(gen.prompt)
    if args.oracle_recall:
        engine.enable_oracle_recall()
    engine.prefill([(dec.k[i], dec.v[i]) for i in range(dims.layers)])
    try:
        engine.decode_sequence(gen.step_inputs)
    except ConfigurationError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    stats = engine.stats
    print(f"backend {args.backend}")
    print(f"params g={cfg.group_size} sigma={cfg.sigma:g} m={cfg.m_groups} "
          f"c_bytes={cfg.reuse_capacity_bytes}")
    print(f"steps {len(stats.steps)}")
    print(f"tokens_per_sec {stats.tokens_per_sec:.3f}")
    print(f"reuse_rate {stats.reuse_rate:.4f}")
    print(f"io_utilization {stats.io_utilization:.4f}")
    print(f"io_seconds {stats.totals('io_seconds'):.6f}")
    print(f"compute_seconds {stats.totals('compute_seconds'):.6f}")
    print(f"wall_seconds {stats.totals('wall_seconds'):.6f}")
    print(f"bytes_read {int(stats.totals('bytes_read'))}")
    print(f"groups_flushed {int(stats.totals('groups_flushed'))}")
    if args.oracle_recall:
        recalls = engine.recall_log_flat()
        print(f"oracle_recall_mean {np.mean(recalls):.4f}")
    if args.stats_out:
        stats.write_jsonl(args.stats_out)
        print(f"stats_jsonl {args.stats_out}")
    if args.selection_log:
        engine.write_selection_log(args.selection_log)
        print(f"selection_log {args.selection_log}")
    engine.finalize()
    engine.store.close()
    return EXIT_OK


def cmd_analyze(args) -> int:
    import json

    per_layer: dict[int, list[list[int]]] = {}
    try:
        with open(args.log) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                per_layer.setdefault(int(rec["layer"]), []).append(
                    [int(g) for g in rec["selected"]])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"malformed selection log: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    if not per_layer:
        print("malformed selection log: no records", file=sys.stderr)
        return EXIT_MALFORMED
    overlap_rows = []
    freq_rows = []
    print("layer steps mean_overlap distinct_groups selections")
    for layer in sorted(per_layer):
        sels = per_layer[layer]
        ratios = overlap_ratio(sels) if len(sels) >= 2 else np.array([])
        freq: dict[int, int] = {}
        for sel in sels:
            for g in sel:
                freq[g] = freq.get(g, 0) + 1
        total = sum(freq.values())
        mean = float(ratios.mean()) if ratios.size else 1.0
        print(f"{layer} {len(sels)} {mean:.4f} {len(freq)} {total}")
        overlap_rows.extend((layer, j + 1, r) for j, r in enumerate(ratios))
        freq_rows.extend((layer, g, n) for g, n in sorted(freq.items()))
    if args.out_prefix:
        with open(f"{args.out_prefix}.overlap.tsv", "w") as f:
            f.write("layer\tstep\toverlap_ratio\n")
            for layer, step, r in overlap_rows:
                f.write(f"{layer}\t{step}\t{r:.6f}\n")
        with open(f"{args.out_prefix}.freq.tsv", "w") as f:
            f.write("layer\tgroup\tcount\n")
            for layer, g, n in freq_rows:
                f.write(f"{layer}\t{g}\t{n}\n")
        print(f"plot_data {args.out_prefix}.overlap.tsv {args.out_prefix}.freq.tsv")
    return EXIT_OK


def cmd_make_workload(args) -> int:
    save_workload(SyntheticWorkload(
        seed=args.seed, context_len=args.context_len, steps=args.steps,
        drift=args.drift, locality_width=args.locality_width,
        query_noise=args.query_noise), args.out)
    print(f"workload written to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kvspill",
                                description="Disk-backed KV cache tools")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("tune", help="offline parameter tuning; writes an artifact")
    t.add_argument("--max-context-len", type=int, required=True)
    t.add_argument("--max-batch-size", type=int, required=True)
    t.add_argument("--max-kv-mem", type=float, required=True,
                   help="per-run KV memory budget in MiB")
    t.add_argument("-o", "--out", required=True)
    t.add_argument("--model-config", default=None,
                   help="INI file with a [model] section; toy defaults otherwise")
    t.add_argument("--preset", default="nvme", choices=("nvme", "emmc"))
    t.add_argument("--alpha", type=float, default=0.5)
    t.add_argument("--mg-const", type=int, default=400)
    t.add_argument("--sigma-max", type=float, default=32.0)
    t.add_argument("--g-max", type=int, default=16)
    t.add_argument("--s-min", type=int, default=4096)
    t.add_argument("--s-step", type=int, default=2048)
    t.add_argument("--samples", type=int, default=20,
                   help="held-out prompts for projection fitting")
    t.add_argument("--lookup-samples", type=int, default=2)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_tune)

    r = sub.add_parser("run", help="prefill + decode with a tuning artifact")
    r.add_argument("--config", required=True, help="tuning artifact path")
    r.add_argument("--workload", required=True,
                   help="INI file with [workload] (and optionally [model])")
    r.add_argument("--backend", default="sim", choices=("sim", "file"))
    r.add_argument("--preset", default=None, choices=("nvme", "emmc"))
    r.add_argument("--disk-config", default=None,
                   help="custom disk preset file for the simulated backend")
    r.add_argument("--offload-path", default=None,
                   help=f"KV file path for --backend file (default ${OFFLOAD_ENV})")
    r.add_argument("--steps", type=int, default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--elem-bytes", type=int, default=2, choices=(2, 4))
    r.add_argument("--no-reuse", action="store_true")
    r.add_argument("--serialized", action="store_true",
                   help="disable compute/IO overlap in the timeline")
    r.add_argument("--oracle-recall", action="store_true",
                   help="report per-step selection recall against the exact oracle")
    r.add_argument("--stats-out", default=None)
    r.add_argument("--selection-log", default=None)
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("analyze", help="overlap/frequency report from a selection log")
    a.add_argument("--log", required=True)
    a.add_argument("--out-prefix", default=None)
    a.set_defaults(func=cmd_analyze)

    w = sub.add_parser("make-workload", help="write a workload spec file")
    w.add_argument("-o", "--out", required=True)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--context-len", type=int, default=512)
    w.add_argument("--steps", type=int, default=64)
    w.add_argument("--drift", type=float, default=0.2)
    w.add_argument("--locality-width", type=int, default=64)
    w.add_argument("--query-noise", type=float, default=0.3)
    w.set_defaults(func=cmd_make_workload)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ArtifactMismatchError as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except MalformedInputError as exc:
        print(f"malformed input: {exc}", file=sys.stderr)
        return EXIT_MALFORMED


if __name__ == "__main__":
    sys.exit(main())
