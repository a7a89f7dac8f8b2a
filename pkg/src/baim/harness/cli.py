"""Command-line entry point: ``baim <subcommand>``.

Exit codes: 0 success, 1 configuration/input error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .. import numcore as nc
from ..composer import BaimGraph, compose
from ..deployment import TaskModel, extract_task_model, load, save, task_loss
from ..errors import BaimError, ConfigError, NumericError
from ..learner import Learner, elbo_loss, vae_forward
from ..training import TaskDataset, evaluate, metrics_csv, train_baim
from . import plots
from .gradcheck import gradcheck_graph
from .metrics import frechet_proxy
from .workflow import (
    Workflow,
    WorkflowConfig,
    common_datasets,
    edge_train,
    graph_frechet,
    make_node,
    node_datasets,
    reconstructions,
    sample_rows,
)

log = logging.getLogger("baim")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


def _config(args) -> WorkflowConfig:
    cfg = WorkflowConfig.load(args.config) if args.config else WorkflowConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    nc.set_precision(cfg.precision)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path, kind):
    try:
        model = load(path)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if not isinstance(model, kind):
        names = " or ".join(k.__name__ for k in (kind if isinstance(kind, tuple) else (kind,)))
        raise ConfigError(f"{path} holds a {type(model).__name__}, expected {names}")
    return model


def _emit(header: str, rows) -> None:
    print(header)
    for r in rows:
        print(",".join(str(v) for v in r))


def cmd_edge_train(args) -> int:
    cfg = _config(args)
    out = _out(args)
    nodes = args.nodes if args.nodes else list(range(cfg.n_nodes))
    rows, curves = [], []
    for n in nodes:
        if not 0 <= n < cfg.n_nodes:
            raise ConfigError(f"node {n} outside [0, {cfg.n_nodes})")
        node, curve = edge_train(make_node(cfg, n), cfg.edge_epochs, cfg.learning_rate, cfg.batch_size, cfg.beta)
        size = save(node.learner, out / f"learner_{n}.baim")
        rows.append((n, cfg.edge_epochs, f"{curve[0]:.6f}", f"{curve[-1]:.6f}", size))
        curves.extend((n, e, f"{v:.6f}") for e, v in enumerate(curve))
    (out / "edge_losses.csv").write_text("node,epoch,test_loss\n" + "".join(f"{a},{b},{c}\n" for a, b, c in curves))
    plots.plot_edge_curves({r[0]: [float(c) for n, _, c in curves if n == r[0]] for r in rows}, out / "edge_losses.png")
    _emit("node,epochs,initial_test_loss,final_test_loss,bytes", rows)
    return EXIT_OK


def cmd_compose(args) -> int:
    cfg = _config(args)
    learners = [_load(p, Learner) for p in args.learners]
    graph = compose(learners, None, cfg.h if args.h is None else args.h,
                    nc.RngStream(cfg.seed).child("compose"), cfg.K if args.K is None else args.K)
    size = save(graph, args.out)
    _emit("learners,tasks,candidate_edges,params,bytes",
          [(graph.n_learners, graph.n_tasks, len(graph.edges), graph.param_count(), size)])
    return EXIT_OK


def cmd_cloud_train(args) -> int:
    cfg = _config(args)
    out = _out(args)
    graph = _load(args.graph, BaimGraph)
    train, test = common_datasets(cfg)
    _, metrics = train_baim(graph, train, test, cfg.train_config(args.strategy))
    (out / f"metrics_{args.strategy}.csv").write_text(metrics_csv(metrics))
    save(graph, out / f"graph_{args.strategy}.baim")
    plots.plot_strategy_curves({args.strategy: [m.__dict__ for m in metrics]}, out / f"losses_{args.strategy}.png")
    sys.stdout.write(metrics_csv(metrics))
    return EXIT_OK


def cmd_extract(args) -> int:
    graph = _load(args.graph, BaimGraph)
    if not 0 <= args.task < graph.n_tasks:
        raise ConfigError(f"task {args.task} outside [0, {graph.n_tasks})")
    tm = extract_task_model(graph, args.task)
    size = save(tm, args.out)
    _emit("task,learners,foreign_fragments,edges,params,bytes",
          [(args.task, len(tm.learners), len(tm.foreign_fragments), len(tm.edges), tm.param_count(), size)])
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    model = _load(args.model, (Learner, BaimGraph, TaskModel))
    with nc.no_grad():
        if isinstance(model, Learner):
            node = model.learner_id if args.node is None else args.node
            _, test = node_datasets(cfg, node)
            x = test.x.astype(nc.get_dtype())
            loss = elbo_loss(x, vae_forward(model, x), cfg.beta).item()
            rows = [("learner", node, f"{loss:.6f}", "", f"{frechet_proxy(test.x, reconstructions(model, x)):.6f}")]
        elif isinstance(model, BaimGraph):
            _, test = common_datasets(cfg)
            loss, acc = evaluate(model, test, cfg.beta)
            rows = [("graph", "all", f"{loss:.6f}", f"{acc:.6f}", f"{graph_frechet(model, test):.6f}")]
        else:
            _, test = common_datasets(cfg)
            keep = test.task == model.task_id
            if not keep.any():
                raise ConfigError(f"config has no data for task {model.task_id}")
            x = test.x[keep].astype(nc.get_dtype())
            loss = task_loss(model, x, "eval", None, cfg.beta).item()
            rows = [("task_model", model.task_id, f"{loss:.6f}", "",
                     f"{frechet_proxy(test.x[keep], reconstructions(model, x)):.6f}")]
    _emit("model,scope,test_loss,routing_accuracy,frechet", rows)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _out(args)
    wf = Workflow(cfg)
    report = wf.run()
    (out / "report.json").write_text(report.to_json())
    (out / "metrics.csv").write_text(report.metrics_csv())
    with nc.precision(cfg.precision):
        for t in range(wf.trained[cfg.deploy_strategy].n_tasks):
            save(extract_task_model(wf.trained[cfg.deploy_strategy], t), out / f"task_model_{t}.baim")
        for strat, graph in wf.trained.items():
            save(graph, out / f"graph_{strat}.baim")
        samples = sample_rows(wf, 0, 8)
    figures = plots.report_figures(report, out, samples, cfg.image_side)
    _emit("node,frechet_edge_model,frechet_personalized",
          [(n, f"{report.frechet_before[n]:.6f}", f"{report.frechet_after[n]:.6f}") for n in sorted(report.frechet_before)])
    print(f"# bytes_uploaded={report.bytes_uploaded} bytes_downloaded={report.bytes_downloaded} "
          f"improved_nodes={report.improved_nodes()}/{len(report.frechet_before)}")
    print("# figures: " + " ".join(str(p) for p in figures))
    sys.stdout.write(report.metrics_csv())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok = True
    for seed in args.seeds:
        res = gradcheck_graph(seed=seed, n_samples=args.samples, tol=args.tol)
        print(res.line())
        ok &= res.passed
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="baim", description="Bottom-up composition of edge-trained generative models.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default=None):
        sp.add_argument("--config", help="YAML workflow config (defaults apply to missing keys)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        if out_default is not None:
            sp.add_argument("--out", default=out_default, help="output directory")

    sp = sub.add_parser("edge-train", help="train node learners locally and write learner_<n>.baim")
    common(sp, "baim_out")
    sp.add_argument("--nodes", type=int, nargs="*", help="node ids (default: all)")
    sp.set_defaults(func=cmd_edge_train)

    sp = sub.add_parser("compose", help="compose uploaded learners into a graph file")
    common(sp)
    sp.add_argument("learners", nargs="+", help="learner .baim files")
    sp.add_argument("--h", type=int, help="connection height")
    sp.add_argument("--K", type=int, help="learners selected per input")
    sp.add_argument("--out", default="graph.baim", help="graph file to write")
    sp.set_defaults(func=cmd_compose)

    sp = sub.add_parser("cloud-train", help="train a composed graph on the common dataset")
    common(sp, "baim_out")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--strategy", choices=["finetune", "freeze", "scratch"], default="finetune")
    sp.set_defaults(func=cmd_cloud_train)

    sp = sub.add_parser("extract", help="extract the task model of one task")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--task", type=int, required=True)
    sp.add_argument("--out", default="task_model.baim")
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("evaluate", help="test loss and Fréchet proxy of a .baim model")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--node", type=int, help="node whose test split scores a learner (default: its id)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("simulate", help="run the whole edge-cloud workflow and write report, metrics and figures")
    common(sp, "baim_out")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of a composed graph in fp64")
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    sp.add_argument("--samples", type=int, default=120)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def _numeric_cause(exc: BaseException) -> bool:
    while exc is not None:
        if isinstance(exc, NumericError):
            return True
        exc = exc.__cause__
    return False


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (BaimError, OSError) as exc:
        print(f"baim {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if _numeric_cause(exc) else EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
