"""Command-line entry point.

Subcommands cover the full pipeline: synth, annotate, graph, partition,
mine, train, embed, index, retrieve, evaluate. Exit codes: 0 success,
1 domain error (single `error:` line on stderr), 2 usage error. All
randomness flows from explicit --seed flags.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import aggregate, annotate, mining, retrieval, synth, trainer, viewgraph
from . import recon as recon_io
from .losses import HEAD_ALPHA, LossConfig

ENV_THREADS = "PAIRFORGE_THREADS"


@dataclass
class GlobalOptions:
    verbosity: int = 0
    threads: int = 1
    deterministic: bool = False


class CliError(ValueError):
    pass


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    opts = GlobalOptions(verbosity=args.verbose, threads=_thread_hint(args.threads),
                         deterministic=args.deterministic)
    if args.dump_config:
        print(json.dumps(_config_dict(args), sort_keys=True))
        return 0
    try:
        args.func(args, opts)
        return 0
    except BrokenPipeError:
        return 1
    except (ValueError, KeyError, OSError, mining.MiningError,
            trainer.TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _thread_hint(flag_value):
    if flag_value is not None:
        return flag_value
    return int(os.environ.get(ENV_THREADS, "1"))


def _config_dict(args):
    skip = {"func", "dump_config"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def _log(opts, message):
    if opts.verbosity > 0:
        print(message, file=sys.stderr)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="pairforge",
        description="Geometry-supervised match pair retrieval toolkit")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--threads", type=int, default=None,
                        help=f"worker hint; ${ENV_THREADS} overrides the default")
    parser.add_argument("--deterministic", action="store_true",
                        help="force single-threaded reductions (bit-stable output)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--scenes", type=int, default=3)
    p.add_argument("--grid", default="4x4", help="camera lattice ROWSxCOLS")
    p.add_argument("--overlap", type=float, default=0.4)
    p.add_argument("--points-per-cell", type=int, default=40)
    p.add_argument("--dim", type=int, default=16, help="descriptor dimension")
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    _finish(p, _cmd_synth)

    p = sub.add_parser("annotate", help="covisibility positive lists")
    p.add_argument("--recon", required=True)
    p.add_argument("--epsilon", type=int, default=annotate.DEFAULT_EPSILON)
    p.add_argument("--out", required=True)
    _finish(p, _cmd_annotate)

    p = sub.add_parser("graph", help="build the weighted view graph")
    p.add_argument("--recon", required=True)
    p.add_argument("--matches", required=True)
    p.add_argument("--rew", type=float, default=viewgraph.DEFAULT_R_EW)
    p.add_argument("--out", required=True)
    _finish(p, _cmd_graph)

    p = sub.add_parser("partition", help="normalized-cut partition of a graph")
    p.add_argument("--graph", required=True)
    p.add_argument("--max-size", type=int, default=viewgraph.DEFAULT_MAX_CLUSTER_SIZE)
    p.add_argument("--out", required=True)
    _finish(p, _cmd_partition)

    p = sub.add_parser("mine", help="generate training batches")
    p.add_argument("--poslists", required=True)
    p.add_argument("--recon", required=True, help="scene structure source")
    p.add_argument("--strategy", choices=["batched", "global-hard"], default="batched")
    p.add_argument("--b", type=int, default=5)
    p.add_argument("--m", type=int, default=3)
    p.add_argument("--t", type=int, default=1)
    p.add_argument("--k", type=int, default=2, help="negatives per query (global-hard)")
    p.add_argument("--desc", help="descriptor file (global-hard only)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _finish(p, _cmd_mine)

    p = sub.add_parser("train", help="optimize a head on mined batches")
    p.add_argument("--batches", required=True)
    p.add_argument("--inputs", required=True,
                   help="directory of .fmap files, or of a .dvec for the linear head")
    p.add_argument("--recon", required=True, help="maps image ids to names")
    p.add_argument("--head", choices=["linear", "gem", "netvlad"], default="linear")
    p.add_argument("--loss", choices=["triplet", "rll"], default="rll")
    p.add_argument("--alpha", type=float, default=None,
                   help="hypersphere radius (default depends on head)")
    p.add_argument("--margin", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--clusters", type=int, default=aggregate.DEFAULT_CLUSTERS,
                   help="codebook size when initializing a netvlad head")
    p.add_argument("--params", help="initial head parameters file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint file")
    p.add_argument("--log", help="metrics log file (step epoch lr loss active_terms)")
    _finish(p, _cmd_train)

    p = sub.add_parser("embed", help="aggregate inputs into global descriptors")
    p.add_argument("--maps", help="directory of .fmap files")
    p.add_argument("--desc", help="base descriptor file (linear head)")
    p.add_argument("--head", choices=["netvlad", "gem", "max", "linear"], required=True)
    p.add_argument("--params", help="head parameter file or checkpoint")
    p.add_argument("--out", required=True)
    _finish(p, _cmd_embed)

    p = sub.add_parser("index", help="build an approximate search index")
    p.add_argument("--desc", required=True)
    p.add_argument("--max-degree", type=int, default=16)
    p.add_argument("--build-beam", type=int, default=200)
    p.add_argument("--query-beam", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _finish(p, _cmd_index)

    p = sub.add_parser("retrieve", help="query an index")
    p.add_argument("--index", required=True)
    p.add_argument("--desc", required=True)
    p.add_argument("--k", type=int, default=retrieval.DEFAULT_RETRIEVAL_NUMBER)
    p.add_argument("--out", required=True)
    _finish(p, _cmd_retrieve)

    p = sub.add_parser("evaluate", help="accuracy of retrieved pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--matches", required=True)
    p.add_argument("--inlier-threshold", type=int,
                   default=retrieval.DEFAULT_INLIER_THRESHOLD)
    p.add_argument("--recon", help="maps ids in the matches file to names")
    _finish(p, _cmd_evaluate)

    return parser


def _finish(p, func):
    p.add_argument("--dump-config", action="store_true",
                   help="print the resolved configuration as JSON and exit")
    p.set_defaults(func=func)


# ---------------------------------------------------------------------------
# command bodies


def _cmd_synth(args, opts):
    rows, _, cols = args.grid.partition("x")
    try:
        grid = (int(rows), int(cols))
    except ValueError:
        raise CliError(f"--grid expects ROWSxCOLS, got {args.grid!r}") from None
    cfg = synth.SynthConfig(scenes=args.scenes, grid=grid,
                            overlap_fraction=args.overlap,
                            points_per_cell=args.points_per_cell,
                            descriptor_dim=args.dim, noise_sigma=args.noise,
                            rng_seed=args.seed)
    result = synth.generate(cfg)
    out = Path(args.out)
    (out / "maps").mkdir(parents=True, exist_ok=True)
    (out / "recon.txt").write_text(recon_io.write_reconstruction(result.recon))
    (out / "matches.txt").write_text(recon_io.write_matches(result.matches))
    for name, fmap in result.feature_maps.items():
        (out / "maps" / f"{name}.fmap").write_bytes(recon_io.write_feature_map(fmap))
    _write_descriptors(out / "base.dvec", synth.base_descriptors(result.feature_maps))
    _log(opts, f"synth: {len(result.recon.images)} images, "
               f"{len(result.recon.points)} points, {len(result.matches)} pairs")


def _cmd_annotate(args, opts):
    recon = recon_io.parse_reconstruction(Path(args.recon).read_text()).validate()
    table = annotate.build_covisibility(recon)
    lists = annotate.positive_lists(table, recon, epsilon=args.epsilon)
    Path(args.out).write_text(annotate.write_positive_lists(lists))
    _log(opts, f"annotate: {sum(len(v) for v in lists.values())} positive entries")


def _cmd_graph(args, opts):
    recon = recon_io.parse_reconstruction(Path(args.recon).read_text()).validate()
    matches = recon_io.parse_matches(Path(args.matches).read_text())
    graph = viewgraph.build_view_graph(matches, recon, r_ew=args.rew)
    Path(args.out).write_text(viewgraph.write_view_graph(graph))
    _log(opts, f"graph: {len(graph.edges)} edges over {len(graph.vertices)} vertices")


def _cmd_partition(args, opts):
    graph = viewgraph.parse_view_graph(Path(args.graph).read_text())
    partition = viewgraph.normalized_cut(graph, max_cluster_size=args.max_size)
    Path(args.out).write_text(viewgraph.write_partition(partition))
    _log(opts, f"partition: {partition.n_clusters} clusters")


def _cmd_mine(args, opts):
    recon = recon_io.parse_reconstruction(Path(args.recon).read_text()).validate()
    poslists = annotate.parse_positive_lists(Path(args.poslists).read_text())
    poslists = {image_id: poslists.get(image_id, []) for image_id in recon.images}
    scene_of = {image_id: img.scene for image_id, img in recon.images.items()}
    if args.strategy == "batched":
        cfg = mining.MiningConfig(b=args.b, m=args.m, t=args.t, rng_seed=args.seed)
        batches = mining.mine_batched(poslists, scene_of, cfg)
        Path(args.out).write_text(mining.write_batches(batches))
        _log(opts, f"mine: {len(batches)} batches of {args.b}x({args.m}+1)")
    else:
        if not args.desc:
            raise CliError("global-hard mining needs --desc")
        dset = _read_descriptors(Path(args.desc))
        descriptors = recon_io.descriptors_by_id(dset, recon)
        lines = []
        for query in sorted(recon.images):
            negatives = mining.mine_global_hard_negatives(
                query, descriptors, scene_of, k=args.k)
            lines.append(f"NEG {query} " + " ".join(str(n) for n in negatives))
        Path(args.out).write_text("\n".join(lines) + "\n")
        _log(opts, f"mine: hard negatives for {len(recon.images)} queries")


def _cmd_train(args, opts):
    recon = recon_io.parse_reconstruction(Path(args.recon).read_text()).validate()
    batches = mining.parse_batches(Path(args.batches).read_text())
    if not batches:
        raise CliError("batch file is empty")
    alpha = args.alpha if args.alpha is not None else HEAD_ALPHA[args.head]
    cfg = trainer.TrainConfig(
        initial_lr=args.lr, epochs=args.epochs, iterations_per_epoch=args.iters,
        loss_kind="ranked-list" if args.loss == "rll" else "triplet",
        loss=LossConfig(margin=args.margin, alpha=alpha), seed=args.seed)

    needed = sorted({i for batch in batches for i in batch.image_ids()})
    inputs, head = _load_train_inputs(args, recon, needed)
    state = trainer.train(batches, inputs, cfg, head=head)
    Path(args.out).write_bytes(trainer.checkpoint(state, cfg))
    if args.log:
        Path(args.log).write_text("\n".join(state.metrics_log) + "\n")
    _log(opts, f"train: {state.step} steps, final loss {state.loss_history[-1]:.6f}")


def _load_train_inputs(args, recon, needed_ids):
    inputs_dir = Path(args.inputs)
    if args.head == "linear":
        dvec = sorted(inputs_dir.glob("*.dvec"))
        if not dvec:
            raise CliError(f"no .dvec file in {inputs_dir}")
        dset = _read_descriptors(dvec[0])
        by_id = recon_io.descriptors_by_id(dset, recon)
        inputs = {i: by_id[i] for i in needed_ids}
        head = _head_from_params(args, inputs, dim=dset.dim)
    else:
        inputs = {}
        for image_id in needed_ids:
            path = inputs_dir / f"{recon.images[image_id].name}.fmap"
            if not path.exists():
                raise CliError(f"missing feature map {path}")
            inputs[image_id] = recon_io.parse_feature_map(path.read_bytes())
        head = _head_from_params(args, inputs)
    return inputs, head


def _head_from_params(args, inputs, dim=None):
    if args.params:
        return _load_head(Path(args.params), args.head)
    if args.head == "linear":
        return trainer.LinearHead.identity(dim)
    if args.head == "gem":
        any_map = next(iter(inputs.values()))
        return trainer.GemHead(aggregate.GemParams(
            p=np.full(any_map.dims[0], aggregate.DEFAULT_GEM_P)))
    if args.head == "netvlad":
        samples = np.concatenate(
            [m.values.reshape(m.dims[0], -1).T for m in inputs.values()])
        norms = np.linalg.norm(samples, axis=1, keepdims=True)
        samples = samples / np.maximum(norms, 1e-12)
        params = aggregate.netvlad_init(samples, args.clusters, rng_seed=args.seed)
        return trainer.NetVladHead(params)
    raise CliError(f"head {args.head!r} is not trainable")


def _cmd_embed(args, opts):
    head = _embed_head(args)
    if args.head == "linear":
        if not args.desc:
            raise CliError("the linear head embeds --desc descriptors")
        dset = _read_descriptors(Path(args.desc))
        names = list(dset.names)
        vectors = [head.forward(v, source=n)[0].vector
                   for n, v in zip(dset.names, dset.vectors)]
    else:
        if not args.maps:
            raise CliError(f"the {args.head} head embeds --maps feature maps")
        paths = sorted(Path(args.maps).glob("*.fmap"))
        if not paths:
            raise CliError(f"no .fmap files in {args.maps}")
        names, vectors = [], []
        for path in paths:
            fmap = recon_io.parse_feature_map(path.read_bytes())
            names.append(path.stem)
            vectors.append(head.forward(fmap, source=path.stem)[0].vector)
    _write_descriptors(Path(args.out),
                       recon_io.DescriptorSet(names=names, vectors=np.stack(vectors)))
    _log(opts, f"embed: {len(names)} descriptors of dim {vectors[0].shape[0]}")


def _embed_head(args):
    if args.params:
        return _load_head(Path(args.params), args.head)
    if args.head == "max":
        return trainer.MaxHead()
    if args.head == "gem":
        return trainer.GemHead(aggregate.GemParams(p=np.asarray(aggregate.DEFAULT_GEM_P)))
    if args.head == "linear":
        raise CliError("the linear head needs --params (checkpoint or parameter file)")
    raise CliError("the netvlad head needs --params (checkpoint or parameter file)")


def _load_head(path, kind):
    data = path.read_bytes()
    if data[:2] == b"PK":  # checkpoint archive
        state = trainer.restore(data)
        if state.head.kind != kind:
            raise CliError(f"checkpoint holds a {state.head.kind} head, not {kind}")
        return state.head
    params = aggregate_params_read(data)
    if params[0] != kind:
        raise CliError(f"parameter file holds a {params[0]} head, not {kind}")
    return _head_of(params)


def _head_of(params):
    kind = params[0]
    if kind == "netvlad":
        return trainer.NetVladHead(params[1])
    if kind == "gem":
        return trainer.GemHead(params[1])
    if kind == "max":
        return trainer.MaxHead()
    if kind == "linear":
        return trainer.LinearHead(params[1])
    raise CliError(f"unknown head kind {kind!r}")


def _cmd_index(args, opts):
    dset = _read_descriptors(Path(args.desc))
    cfg = retrieval.AnnConfig(max_degree=args.max_degree, build_beam=args.build_beam,
                              query_beam=args.query_beam, seed=args.seed)
    index = retrieval.build_ann_index(dset, cfg)
    Path(args.out).write_bytes(retrieval.save_index(index))
    _log(opts, f"index: {len(index)} vectors, max level {index.max_level}")


def _cmd_retrieve(args, opts):
    index = retrieval.load_index(Path(args.index).read_bytes())
    dset = _read_descriptors(Path(args.desc))
    results = retrieval.ann_query(index, dset, k=args.k)
    Path(args.out).write_text(retrieval.write_pairs(results))
    _log(opts, f"retrieve: {len(results)} queries, k={args.k}")


def _cmd_evaluate(args, opts):
    results = retrieval.parse_pairs(Path(args.pairs).read_text())
    matches = recon_io.parse_matches(Path(args.matches).read_text())
    recon = None
    if args.recon:
        recon = recon_io.parse_reconstruction(Path(args.recon).read_text()).validate()
    truth = retrieval.ground_truth_from_matches(
        matches, recon, inlier_threshold=args.inlier_threshold)
    pairs = retrieval.retrieved_pairs(results)
    correct = len(pairs & truth)
    accuracy = correct / len(pairs) if pairs else 0.0
    print(f"accuracy={accuracy} pairs={len(pairs)} correct={correct}")


# ---------------------------------------------------------------------------
# descriptor and parameter file helpers


def _write_descriptors(path, dset):
    payload, names = recon_io.write_descriptors(dset)
    path.write_bytes(payload)
    Path(str(path) + ".names").write_text(names)


def _read_descriptors(path):
    names_path = Path(str(path) + ".names")
    if not names_path.exists():
        raise CliError(f"missing names sidecar {names_path}")
    return recon_io.parse_descriptors(path.read_bytes(), names_path.read_text())


def aggregate_params_write(head):
    """Head parameters as a one-line text header plus a DVEC payload."""
    kind = head.kind
    if kind == "netvlad":
        p = head.params
        k, d = p.centers.shape
        bias_rows = -(-k // d)
        padded = np.zeros(bias_rows * d)
        padded[:k] = p.assign_bias
        rows = np.vstack([p.centers, p.assign_weights, padded.reshape(bias_rows, d)])
        header = f"netvlad k={k} dim={d} sharpness={p.sharpness!r}\n"
    elif kind == "gem":
        p = np.atleast_2d(head.params.p)
        rows = p if p.ndim == 2 else p.reshape(1, -1)
        header = f"gem channels={rows.shape[1]} shared={int(head.params.shared)}\n"
    elif kind == "max":
        rows = np.zeros((0, 1))
        header = "max\n"
    elif kind == "linear":
        rows = head.weight
        header = f"linear out={rows.shape[0]} in={rows.shape[1]}\n"
    else:
        raise ValueError(f"unknown head kind {kind!r}")
    payload, _ = recon_io.write_descriptors(
        recon_io.DescriptorSet(names=[f"row{i}" for i in range(rows.shape[0])],
                               vectors=rows))
    return header.encode() + payload


def aggregate_params_read(data):
    newline = data.index(b"\n")
    header = data[:newline].decode()
    fields = dict(token.split("=", 1) for token in header.split()[1:])
    kind = header.split()[0]
    body = data[newline + 1:]
    count = int.from_bytes(body[8:12], "little") if len(body) >= 12 else 0
    dset = recon_io.parse_descriptors(
        body, "\n".join(f"row{i}" for i in range(count)) + ("\n" if count else ""))
    if kind == "netvlad":
        k, d = int(fields["k"]), int(fields["dim"])
        centers = dset.vectors[:k]
        weights = dset.vectors[k:2 * k]
        bias = dset.vectors[2 * k:].reshape(-1)[:k]
        return ("netvlad", aggregate.NetVladParams(
            centers=centers, assign_weights=weights, assign_bias=bias,
            sharpness=float(fields["sharpness"])))
    if kind == "gem":
        p = dset.vectors[0]
        if int(fields.get("shared", "0")):
            p = np.asarray(p[0])
        return ("gem", aggregate.GemParams(p=p))
    if kind == "max":
        return ("max", None)
    if kind == "linear":
        return ("linear", dset.vectors)
    raise ValueError(f"unknown head kind in parameter file: {kind!r}")


if __name__ == "__main__":
    sys.exit(main())
