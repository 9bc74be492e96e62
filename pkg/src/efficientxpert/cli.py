"""Command-line entry point and on-disk conventions.

Subcommands: ``demo`` (worked propagation example), ``score`` (importance
scores for a model container), ``prune`` (scores -> mask container),
``pbs`` (adapter correction for a model + mask), ``run`` (full pipeline
from a config file), ``analyze`` (subspace / relative-performance reports).

Exit codes: 0 success, 2 validation failure, 3 numeric failure. Errors are
one machine-parsable line on stderr: ``error: <Type>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import grassmann_distance, projection_energy, propagation_demo, relative_performance, render_demo
from .container import ContainerError, load_container, save_container
from .masking import rowwise_prune, sparsity_of
from .model import LoraLinear, PairingRule, ToyModel, compose_effective
from .pbs import pbs_correct, reports_to_dicts, reports_to_text
from .tasks import (
    build_toy_mlp,
    calibration_inputs,
    char_classification_task,
    make_teacher,
    regression_task,
)
from .trainer import PruneConfig, efficientxpert_run, score_model_layers, wanda_baseline_run
from .validation import MaskError, NumericError, ShapeError

__all__ = ["main", "RunManifest", "model_to_tensors", "model_from_tensors", "load_config"]

_PAIRING_CODES = {"downstream": 0, "attention_q": 1, "attention_k": 2, "local_fallback": 3}
_PAIRING_KINDS = {v: k for k, v in _PAIRING_CODES.items()}
_ACTIVATION_CODES = {"identity": 0, "relu": 1}
_ACTIVATION_KINDS = {v: k for k, v in _ACTIVATION_CODES.items()}


# ---------------------------------------------------------------------------
# model <-> named tensors


def model_to_tensors(model: ToyModel) -> dict[str, np.ndarray]:
    """Flatten a model into container tensors (see README for the naming)."""
    tensors: dict[str, np.ndarray] = {
        "meta.num_layers": np.array([len(model.layers)], dtype=np.float64)
    }
    if model.activations:
        tensors["meta.activations"] = np.array(
            [_ACTIVATION_CODES[a] for a in model.activations], dtype=np.float64
        )
    for i, layer in enumerate(model.layers):
        tensors[f"layer{i}.base_w"] = layer.base_w
        tensors[f"layer{i}.adapter_b"] = layer.adapter_b
        tensors[f"layer{i}.adapter_a"] = layer.adapter_a
        tensors[f"layer{i}.scale"] = np.array([layer.scale], dtype=np.float64)
        if layer.mask is not None:
            tensors[f"layer{i}.mask"] = layer.mask.astype(np.uint8)
        rule = model.pairing.get(i)
        if rule is not None:
            partner = -1 if rule.partner is None else rule.partner
            tensors[f"layer{i}.pairing"] = np.array(
                [_PAIRING_CODES[rule.kind], partner], dtype=np.float64
            )
    return tensors


def model_from_tensors(tensors: dict[str, np.ndarray]) -> ToyModel:
    """Rebuild a model from container tensors."""
    if "meta.num_layers" not in tensors:
        raise ValueError("container does not describe a model (meta.num_layers missing)")
    n_layers = int(np.asarray(tensors["meta.num_layers"]).ravel()[0])
    layers = []
    pairing: dict[int, PairingRule] = {}
    for i in range(n_layers):
        try:
            base = tensors[f"layer{i}.base_w"]
            b = tensors[f"layer{i}.adapter_b"]
            a = tensors[f"layer{i}.adapter_a"]
        except KeyError as exc:
            raise ValueError(f"container is missing tensor {exc.args[0]!r}") from exc
        scale = float(np.asarray(tensors.get(f"layer{i}.scale", [1.0])).ravel()[0])
        mask = tensors.get(f"layer{i}.mask")
        if mask is not None:
            mask = mask.astype(np.float64)
        layers.append(LoraLinear(base, b, a, scale=scale, mask=mask))
        rule = tensors.get(f"layer{i}.pairing")
        if rule is not None:
            code, partner = np.asarray(rule, dtype=np.float64).ravel()
            partner = None if partner < 0 else int(partner)
            pairing[i] = PairingRule(_PAIRING_KINDS[int(code)], partner)
    acts = tensors.get("meta.activations")
    activations = (
        tuple(_ACTIVATION_KINDS[int(c)] for c in np.asarray(acts).ravel())
        if acts is not None
        else ("identity",) * (n_layers - 1)
    )
    return ToyModel(tuple(layers), pairing, activations)


# ---------------------------------------------------------------------------
# config files and manifests

_TASK_DEFAULTS = {
    "kind": "regression",
    "widths": [16, 32, 24, 12],
    "n_train": 256,
    "n_eval": 256,
    "shift_rank": 4,
    "shift_scale": 0.5,
    "gain_spread": 1.0,
    "alphabet_size": 12,
    "n_classes": 3,
    "seq_len": 24,
}


@dataclass
class RunManifest:
    """What a run consumed and produced, written alongside its outputs."""

    config: dict
    toolkit_version: str
    seed: int
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    kind: str = "run-manifest"

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path) -> dict:
    """Load a run config (or a manifest, whose config echo is reused)."""
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError("config root must be a JSON object")
    if doc.get("kind") == "run-manifest":
        doc = doc["config"]
    known = {"method", "task", "prune"}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    method = doc.get("method", "efficientxpert")
    if method not in ("efficientxpert", "wanda_baseline"):
        raise ValueError(f"unknown method {method!r}")
    task = dict(_TASK_DEFAULTS)
    task.update(doc.get("task", {}))
    unknown = set(task) - set(_TASK_DEFAULTS)
    if unknown:
        raise ValueError(f"unknown task keys: {sorted(unknown)}")
    if task["kind"] not in ("regression", "classification"):
        raise ValueError(f"unknown task kind {task['kind']!r}")
    prune = PruneConfig.from_dict(doc.get("prune", {}))
    return {"method": method, "task": task, "prune": prune}


def build_run_inputs(task: dict, prune: PruneConfig):
    """Deterministically build (model, data, calibration) from a config."""
    seed = prune.seed
    if task["kind"] == "regression":
        model = build_toy_mlp(
            task["widths"], rank=prune.rank, seed=seed, gain_spread=task["gain_spread"]
        )
        teacher = make_teacher(
            model, seed=seed + 1, shift_rank=task["shift_rank"], shift_scale=task["shift_scale"]
        )
        data = regression_task(teacher, task["n_train"], task["n_eval"], seed=seed + 2)
    else:
        widths = list(task["widths"])
        widths[0] = task["alphabet_size"]
        widths[-1] = task["n_classes"]
        model = build_toy_mlp(
            widths, rank=prune.rank, seed=seed, gain_spread=task["gain_spread"]
        )
        data = char_classification_task(
            task["n_train"],
            task["n_eval"],
            task["alphabet_size"],
            task["n_classes"],
            task["seq_len"],
            seed=seed + 2,
        )
    calibration = calibration_inputs(
        model.in_dim, prune.calibration_batches, prune.calibration_seq_len, seed + 3
    )
    return model, data, calibration


# ---------------------------------------------------------------------------
# subcommands


def _emit(args, payload: dict, text: str) -> None:
    if getattr(args, "format", "text") == "json":
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(text)


def cmd_demo(args) -> int:
    report = propagation_demo()
    _emit(args, report, render_demo(report, "text"))
    return 0


def _load_calibration(args, model: ToyModel) -> np.ndarray:
    if args.calibration:
        tensors = load_container(args.calibration)
        if "calibration" not in tensors:
            raise ValueError(
                f"{args.calibration} has no 'calibration' tensor; "
                f"found {sorted(tensors)}"
            )
        return tensors["calibration"].astype(np.float64)
    return calibration_inputs(model.in_dim, 8, 16, args.seed)


def cmd_score(args) -> int:
    model = model_from_tensors(load_container(args.weights))
    calibration = _load_calibration(args, model)
    scores = score_model_layers(model, calibration, args.criterion)
    out = {f"layer{i}.scores": sm.scores for i, sm in scores.items()}
    save_container(args.out, out)
    print(f"wrote {len(out)} score tensors to {args.out}")
    return 0


def cmd_prune(args) -> int:
    tensors = load_container(args.scores)
    masks: dict[str, np.ndarray] = {}
    for name, arr in tensors.items():
        if arr.ndim != 2:
            continue
        mask = rowwise_prune(np.asarray(arr, dtype=np.float64), args.sparsity)
        out_name = name[: -len(".scores")] + ".mask" if name.endswith(".scores") else name + ".mask"
        masks[out_name] = mask.astype(np.uint8)
    if not masks:
        raise ValueError(f"{args.scores} contains no 2-D score tensors")
    save_container(args.out, masks)
    fractions = {n: sparsity_of(m.astype(np.float64)) for n, m in masks.items()}
    print(f"wrote {len(masks)} masks to {args.out} " f"(sparsity {fractions})")
    return 0


def cmd_pbs(args) -> int:
    model = model_from_tensors(load_container(args.weights))
    mask_tensors = load_container(args.mask)
    deltas: dict[str, np.ndarray] = {}
    all_reports = {}
    for i, layer in enumerate(model.layers):
        name = f"layer{i}.mask"
        if name not in mask_tensors:
            continue
        mask = mask_tensors[name].astype(np.float64)
        delta, reports = pbs_correct(layer, mask, args.ridge_lambda, threads=args.threads)
        deltas[f"layer{i}.delta_b"] = delta
        all_reports[i] = reports
    if not deltas:
        raise ValueError(f"{args.mask} contains no 'layer<i>.mask' tensors matching the model")
    save_container(args.out, deltas)
    payload = {
        "out": str(args.out),
        "reports": {str(i): reports_to_dicts(r) for i, r in all_reports.items()},
    }
    text = "\n\n".join(
        f"layer {i}\n{reports_to_text(r)}" for i, r in sorted(all_reports.items())
    )
    _emit(args, payload, text + f"\nwrote {len(deltas)} update tensors to {args.out}")
    return 0


def cmd_run(args) -> int:
    t0 = time.perf_counter()
    cfg = load_config(args.config)
    prune: PruneConfig = cfg["prune"]
    overrides = {
        "sparsity": args.sparsity,
        "criterion": args.criterion,
        "ridge_lambda": args.ridge_lambda,
        "ema_rate": args.ema_rate,
        "epochs": args.epochs,
        "seed": args.seed,
    }
    changed = {k: v for k, v in overrides.items() if v is not None}
    if changed:
        prune = PruneConfig.from_dict({**prune.to_dict(), **changed})
    model, data, calibration = build_run_inputs(cfg["task"], prune)
    t1 = time.perf_counter()

    run = efficientxpert_run if cfg["method"] == "efficientxpert" else wanda_baseline_run
    sparse, record = run(model, data, calibration, prune, threads=args.threads)
    t2 = time.perf_counter()

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_path = out_dir / "model.xptc"
    record_path = out_dir / "record.json"
    manifest_path = out_dir / "manifest.json"
    save_container(model_path, model_to_tensors(sparse))
    record_path.write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n")
    manifest = RunManifest(
        config={
            "method": cfg["method"],
            "task": cfg["task"],
            "prune": prune.to_dict(),
        },
        toolkit_version=__version__,
        seed=prune.seed,
        inputs={"config": str(args.config)},
        outputs={"model": str(model_path), "record": str(record_path)},
        timings={
            "setup_s": t1 - t0,
            "run_s": t2 - t1,
            "total_s": time.perf_counter() - t0,
        },
    )
    manifest_path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    summary = {
        "method": record.method,
        "eval_metrics": record.eval_metrics,
        "final_sparsity": record.final_sparsity,
        "outputs": manifest.outputs,
    }
    _emit(
        args,
        summary,
        f"{record.method}: eval {record.eval_metrics} "
        f"final sparsity {record.final_sparsity} -> {model_path}",
    )
    return 0


def _layer_adapter_products(model: ToyModel) -> dict[int, np.ndarray]:
    return {
        i: layer.scale * (layer.adapter_b @ layer.adapter_a)
        for i, layer in enumerate(model.layers)
    }


def cmd_analyze(args) -> int:
    if args.kind == "relperf":
        with open(args.pruned) as fh:
            pruned = json.load(fh)
        with open(args.dense) as fh:
            dense = json.load(fh)
        value = relative_performance(pruned, dense)
        _emit(args, {"relative_performance": value, "averaging": "raw-ratios"},
              f"relative performance: {value:.2f}%")
        return 0
    model = model_from_tensors(load_container(args.weights))
    if args.kind == "grassmann":
        if not args.weights2:
            raise ValueError("analyze --kind grassmann needs --weights2")
        other = model_from_tensors(load_container(args.weights2))
        prods_a = _layer_adapter_products(model)
        prods_b = _layer_adapter_products(other)
        result = {
            str(i): grassmann_distance(prods_a[i], prods_b[i], args.rank)
            for i in sorted(set(prods_a) & set(prods_b))
        }
        text = "\n".join(f"layer {i}: grassmann distance {v:.6f}" for i, v in result.items())
    else:  # projection
        result = {
            str(i): projection_energy(
                layer.scale * (layer.adapter_b @ layer.adapter_a), layer.base_w, args.rank
            )
            for i, layer in enumerate(model.layers)
        }
        text = "\n".join(f"layer {i}: projection energy {v:.6f}" for i, v in result.items())
    _emit(args, {args.kind: result}, text)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="efficientxpert",
        description="Propagation-aware pruning toolkit (desk scale).",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp, fmt=True, threads=False):
        if fmt:
            sp.add_argument("--format", choices=("text", "json"), default="text")
        if threads:
            sp.add_argument("--threads", type=int, default=1)

    sp = sub.add_parser("demo", help="print the worked two-layer propagation example")
    add_common(sp)
    sp.set_defaults(func=cmd_demo)

    sp = sub.add_parser("score", help="importance scores for a model container")
    sp.add_argument("--weights", required=True, help="model container path")
    sp.add_argument("--criterion", choices=("foresight", "wanda", "magnitude"),
                    default="foresight")
    sp.add_argument("--calibration", help="container with a 'calibration' tensor")
    sp.add_argument("--seed", type=int, default=0, help="seed for synthetic calibration")
    sp.add_argument("--out", required=True, help="output scores container")
    add_common(sp, fmt=False, threads=True)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("prune", help="turn score tensors into row-wise masks")
    sp.add_argument("--scores", required=True, help="scores container path")
    sp.add_argument("--sparsity", type=float, required=True)
    sp.add_argument("--out", required=True, help="output mask container")
    sp.set_defaults(func=cmd_prune)

    sp = sub.add_parser("pbs", help="closed-form adapter correction for a mask")
    sp.add_argument("--weights", required=True, help="model container path")
    sp.add_argument("--mask", required=True, help="mask container path")
    sp.add_argument("--lambda", dest="ridge_lambda", type=float, default=1e-8)
    sp.add_argument("--out", required=True, help="output adapter-update container")
    add_common(sp, threads=True)
    sp.set_defaults(func=cmd_pbs)

    sp = sub.add_parser("run", help="full pipeline from a config file")
    sp.add_argument("--config", required=True, help="JSON config (or manifest) path")
    sp.add_argument("--out-dir", required=True, help="directory for outputs")
    sp.add_argument("--sparsity", type=float)
    sp.add_argument("--criterion", choices=("foresight", "wanda", "magnitude"))
    sp.add_argument("--lambda", dest="ridge_lambda", type=float)
    sp.add_argument("--ema", dest="ema_rate", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)
    add_common(sp, threads=True)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("analyze", help="subspace and relative-performance reports")
    sp.add_argument("--kind", choices=("grassmann", "projection", "relperf"), required=True)
    sp.add_argument("--weights", help="model container (grassmann/projection)")
    sp.add_argument("--weights2", help="second model container (grassmann)")
    sp.add_argument("--rank", type=int, default=8)
    sp.add_argument("--pruned", help="pruned metrics JSON (relperf)")
    sp.add_argument("--dense", help="dense metrics JSON (relperf)")
    add_common(sp)
    sp.set_defaults(func=cmd_analyze)
    return p


def _error_line(exc: BaseException) -> str:
    msg = " ".join(str(exc).split())
    return f"error: {type(exc).__name__}: {msg}"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (NumericError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(_error_line(exc), file=sys.stderr)
        return 3
    except (
        ShapeError,
        MaskError,
        ContainerError,
        ValueError,
        KeyError,
        OSError,
        json.JSONDecodeError,
    ) as exc:
        print(_error_line(exc), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
