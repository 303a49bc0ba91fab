"""Single command-line entry point: every workflow is a subcommand.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Each run writes a
manifest (command, config snapshot, seed, version, timestamps, outputs)
before doing any work. ``EDGEBRIDGE_OUT_ROOT`` prefixes relative output
directories; ``EDGEBRIDGE_WORKERS`` overrides the data worker count.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import BRIDGE_MODES, TrainConfig, config_from_mapping, dump_config, load_config
from .data import ingest_directory, make_synthetic
from .evaluate import build_index, eval_fuda, eval_udg, retrieval_grid
from .training import Trainer, load_backbone


def _resolve_out(path: str) -> Path:
    root = os.environ.get("EDGEBRIDGE_OUT_ROOT", "")
    p = Path(path)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _workers_override(value: int) -> int:
    env = os.environ.get("EDGEBRIDGE_WORKERS")
    return int(env) if env else value


def write_run_manifest(out_dir: Path, command: str, config_snapshot: dict,
                       seed: int, outputs: list[str]) -> Path:
    """Record what this run is before it starts; never rewritten."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config_snapshot,
        "seed": seed,
        "version": __version__,
        "started_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "outputs": outputs,
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2))
    return path


def _parse_overrides(pairs: tuple[str, ...]) -> dict:
    from .config import parse_config_text

    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise click.UsageError(f"--set expects key=value, got '{pair}'")
        overrides.update(parse_config_text(pair))
    return overrides


@click.group(name="edgebridge")
@click.version_option(__version__)
def cli():
    """Cross-domain self-supervised training and evaluation workflows."""


@cli.command("make-synthetic")
@click.option("--out", "out_dir", required=True, type=str)
@click.option("--domains", "n_domains", default=4, show_default=True)
@click.option("--classes", "n_classes", default=7, show_default=True)
@click.option("--per-class", default=50, show_default=True)
@click.option("--size", "image_size", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
def make_synthetic_cmd(out_dir, n_domains, n_classes, per_class, image_size, seed):
    """Generate the deterministic synthetic multi-domain dataset."""
    out = _resolve_out(out_dir)
    write_run_manifest(out, "make-synthetic", {
        "n_domains": n_domains, "n_classes": n_classes, "per_class": per_class,
        "image_size": image_size,
    }, seed, [str(out / "manifest.jsonl")])
    manifest = make_synthetic(out, n_domains, n_classes, per_class, image_size, seed)
    click.echo(f"wrote {manifest}")


@cli.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=str)
@click.option("--set", "overrides", multiple=True,
              help="Override a config key, e.g. --set 'epochs = 2'")
def train_cmd(config_path, out_dir, overrides):
    """Train from a flat key=value config file."""
    cfg = load_config(config_path, _parse_overrides(overrides))
    cfg.workers = _workers_override(cfg.workers)
    out = _resolve_out(out_dir)
    write_run_manifest(out, "train", cfg.to_dict(), cfg.seed, [
        str(out / "metrics.csv"), str(out / "checkpoint_final.pt"),
    ])
    (out / "config.cfg").write_text(dump_config(cfg))
    trainer = Trainer(cfg)
    history = trainer.train(out)
    final = history[-1] if history else {}
    click.echo(f"finished {trainer.global_step} steps; final loss "
               f"{final.get('loss_full', float('nan')):.4f}")
    click.echo(f"checkpoint: {out / 'checkpoint_final.pt'}")


def _load_eval_pieces(checkpoint, data_root, image_size):
    backbone = load_backbone(checkpoint)
    dataset = ingest_directory(data_root, image_size)
    return backbone, dataset


@cli.command("eval-udg")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", "data_root", required=True, type=click.Path(exists=True))
@click.option("--sources", required=True, help="comma-separated source domains")
@click.option("--targets", required=True, help="comma-separated target domains")
@click.option("--fraction", default=0.1, show_default=True)
@click.option("--probe", type=click.Choice(["knn", "linear"]), default="knn",
              show_default=True)
@click.option("--k", default=5, show_default=True)
@click.option("--size", "image_size", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", default="", help="optional report directory")
def eval_udg_cmd(checkpoint, data_root, sources, targets, fraction, probe, k,
                 image_size, seed, out_dir):
    """Label-fraction evaluation on held-out target domains."""
    backbone, dataset = _load_eval_pieces(checkpoint, data_root, image_size)
    report = eval_udg(backbone, dataset, sources.split(","), targets.split(","),
                      fraction, probe, seed, k)
    click.echo(report.to_json())
    if out_dir:
        out = _resolve_out(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "udg_report.json").write_text(report.to_json())
        _report_csv(out / "udg_report.csv", report)


@cli.command("eval-fuda")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", "data_root", required=True, type=click.Path(exists=True))
@click.option("--source", required=True)
@click.option("--target", required=True)
@click.option("--shots", type=click.Choice(["1", "3"]), default="1", show_default=True)
@click.option("--probe", type=click.Choice(["knn", "linear"]), default="knn",
              show_default=True)
@click.option("--k", default=1, show_default=True)
@click.option("--size", "image_size", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", default="")
def eval_fuda_cmd(checkpoint, data_root, source, target, shots, probe, k,
                  image_size, seed, out_dir):
    """Few-shot (1/3 labeled source images per class) evaluation."""
    backbone, dataset = _load_eval_pieces(checkpoint, data_root, image_size)
    report = eval_fuda(backbone, dataset, source, target, int(shots), probe,
                       seed, k)
    click.echo(report.to_json())
    if out_dir:
        out = _resolve_out(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "fuda_report.json").write_text(report.to_json())
        _report_csv(out / "fuda_report.csv", report)


def _report_csv(path: Path, report) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["domain", "accuracy"])
        for domain, acc in report.per_domain_accuracy.items():
            writer.writerow([domain, f"{acc:.6f}"])
        writer.writerow(["overall", f"{report.overall:.6f}"])
        writer.writerow(["average", f"{report.average:.6f}"])


@cli.command("knn-demo")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", "data_root", required=True, type=click.Path(exists=True))
@click.option("--query", default="", help="sample_id of the query image")
@click.option("--top-k", default=5, show_default=True)
@click.option("--size", "image_size", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=str)
def knn_demo_cmd(checkpoint, data_root, query, top_k, image_size, seed, out_path):
    """Render a per-domain nearest-neighbor grid for one query image."""
    backbone, dataset = _load_eval_pieces(checkpoint, data_root, image_size)
    if query:
        matches = [s for s in dataset.samples if s.sample_id == query]
        if not matches:
            raise click.UsageError(f"sample_id '{query}' not found in {data_root}")
        sample = matches[0]
    else:
        rng = np.random.default_rng(seed)
        sample = dataset.samples[int(rng.integers(len(dataset.samples)))]
    index = build_index(backbone, dataset.samples)
    out = _resolve_out(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    retrieval_grid(backbone, sample, index, dataset, top_k, out)
    click.echo(f"query {sample.sample_id} -> {out}")


@cli.command("edge-preview")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--method", default="canny", show_default=True,
              help="canny | hed:<weights.pt> | learned:<checkpoint.pt>")
@click.option("--domain", default="", help="domain name for learned mappers")
@click.option("--low", default=0.1, show_default=True)
@click.option("--high", default=0.2, show_default=True)
@click.option("--out", "out_path", required=True, type=str)
def edge_preview_cmd(input_path, method, domain, low, high, out_path):
    """Write the edge map of an image under a chosen edge model."""
    import torch
    from PIL import Image

    from . import edges
    from .bridge import EdgeNet

    with Image.open(input_path) as im:
        image = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0

    if method == "canny":
        edge_map = edges.canny(image, low, high)
    elif method.startswith("hed:"):
        oracle = edges.FrozenEdgeNet(method.split(":", 1)[1])
        edge_map = oracle(image)
    elif method.startswith("learned:"):
        ckpt_path = method.split(":", 1)[1]
        payload = torch.load(ckpt_path, map_location="cpu", weights_only=False)
        mappers = payload.get("mappers", {})
        trained = {name: blob for name, blob in mappers.items() if blob is not None}
        if not trained:
            raise click.UsageError(f"checkpoint {ckpt_path} holds no learned mappers")
        name = domain or sorted(trained)[0]
        if name not in trained:
            raise click.UsageError(
                f"no mapper for domain '{name}'; have {sorted(trained)}")
        cfg = payload["meta"]["config"]
        net = EdgeNet(cfg["mapper_stages"], tuple(cfg["mapper_widths"]))
        net.load_state_dict(trained[name])
        net.eval()
        x = torch.from_numpy(image.transpose(2, 0, 1)[None]).float()
        with torch.no_grad():
            edge_map = net(x)[0, 0].numpy()
    else:
        raise click.UsageError(f"unknown method '{method}'")

    out = _resolve_out(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.clip(edge_map, 0, 1) * 255).astype(np.uint8)).save(out)
    click.echo(f"wrote {out}")


ABLATION_ROWS = list(BRIDGE_MODES)


@cli.command("ablate")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=str)
@click.option("--rows", default="none,canny_fixed,learned",
              show_default=True, help="comma-separated bridge modes")
@click.option("--seeds", default="0", show_default=True)
@click.option("--no-adversary", is_flag=True, help="also ablate the discriminator")
@click.option("--single-queue", is_flag=True, help="also ablate multi-queue")
@click.option("--eval-target", default="", help="held-out domain for the kNN probe")
@click.option("--fraction", default=1.0, show_default=True)
def ablate_cmd(config_path, out_dir, rows, seeds, no_adversary, single_queue,
               eval_target, fraction):
    """Run the bridge/adversary/queue ablation ladder from one base config.

    Each row trains with a config diff only and is scored with the kNN
    probe on the held-out target domain; results land in ablation.csv.
    """
    base = load_config(config_path)
    out = _resolve_out(out_dir)
    row_names = [r.strip() for r in rows.split(",") if r.strip()]
    for r in row_names:
        if r not in BRIDGE_MODES:
            raise click.UsageError(f"unknown ablation row '{r}'; have {BRIDGE_MODES}")
    seed_list = [int(s) for s in seeds.split(",")]

    variants = [("row", name, {"use_bridge": name}) for name in row_names]
    if no_adversary:
        variants.append(("adv_off", "learned_no_adv",
                         {"use_bridge": "learned", "use_adversary": False}))
    if single_queue:
        variants.append(("single_queue", "learned_single_q",
                         {"use_bridge": "learned", "multi_queue": False}))

    write_run_manifest(out, "ablate", {
        "base_config": base.to_dict(), "rows": row_names, "seeds": seed_list,
    }, seed_list[0], [str(out / "ablation.csv")])

    dataset = ingest_directory(base.data_root, base.image_size)
    all_domains = dataset.catalog.domains
    if eval_target:
        target = eval_target
    elif base.train_domains:
        held_out = [d for d in all_domains if d not in base.train_domains]
        if not held_out:
            raise click.UsageError("no held-out domain; pass --eval-target")
        target = held_out[0]
    else:
        target = all_domains[-1]
    results = []
    for kind, name, diff in variants:
        for seed in seed_list:
            raw = base.to_dict()
            raw.update(diff)
            raw["seed"] = seed
            if not raw.get("train_domains"):
                raw["train_domains"] = [d for d in all_domains if d != target]
            cfg = config_from_mapping(raw)
            run_dir = out / f"{name}_seed{seed}"
            click.echo(f"[ablate] {name} seed={seed} -> {run_dir}")
            trainer = Trainer(cfg, dataset)
            trainer.train(run_dir)
            sources = list(cfg.train_domains)
            report = eval_udg(trainer.encoder.backbone, dataset, sources,
                              [target], fraction, "knn", seed)
            results.append({
                "variant": name, "kind": kind, "seed": seed,
                "use_bridge": cfg.use_bridge,
                "use_adversary": cfg.use_adversary,
                "multi_queue": cfg.multi_queue,
                "knn_accuracy": report.average,
            })

    csv_path = out / "ablation.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(results[0].keys()))
        writer.writeheader()
        writer.writerows(results)
    click.echo(f"wrote {csv_path}")


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        click.echo(cli.get_help(click.Context(cli, info_name="edgebridge")), err=True)
        return 2
    try:
        cli.main(args=argv, prog_name="edgebridge", standalone_mode=False)
        return 0
    except click.UsageError as exc:
        exc.show(file=sys.stderr)
        return 2
    except click.ClickException as exc:
        exc.show(file=sys.stderr)
        return 1
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except Exception as exc:  # runtime failure -> exit 1 with a summary
        click.echo(f"error: {exc}", err=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
