"""``msaupaf`` command-line interface.

Exit codes: 0 success, 1 validation failure (bad input files, config or
flags), 2 runtime error (missing checkpoint, aborted training, ...).
"""

from __future__ import annotations

import dataclasses
import logging
import sys
import time
from pathlib import Path

import click

from .baselines import heuristic_link
from .chargrid import build_vocab, rasterize
from .config import apply_kv, parse_kv, read_kv
from .decoder import DecodeConfig, sigmoid
from .funsd_io import FormDocument, ParseError, ValidationError, dataset_stats, load_split
from .metrics import evaluate
from .net import NetConfig
from .render import render_svg
from .synthgen import SynthSpec, generate, write_corpus
from .targets import GridGeometry, LossWeights, encode_targets

logger = logging.getLogger("msaupaf")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


def load_config(path: str | None, overrides: tuple[str, ...] = (), base: dict[str, str] | None = None):
    """TrainConfig, NetConfig, LossWeights and DecodeConfig from a key = value
    file plus ``key=value`` overrides.  Every key must belong to at least one
    of the four sections."""
    from .train import TrainConfig

    values = dict(base or {})
    try:
        if path is not None:
            values.update(read_kv(path))
        values.update(parse_kv("\n".join(overrides)))
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    defaults = (TrainConfig(), NetConfig(), LossWeights(), DecodeConfig())
    known = {f.name for obj in defaults for f in dataclasses.fields(obj)}
    unknown = sorted(set(values) - known)
    if unknown and base is None:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return tuple(apply_kv(obj, values) for obj in defaults)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _forms(directory: str) -> list[tuple[str, FormDocument]]:
    forms = load_split(directory)
    if not forms:
        raise click.UsageError(f"no *.json annotation files in {directory}")
    return forms


def _split_name(directory: str) -> str:
    p = Path(directory).resolve()
    return p.parent.name if p.name == "annotations" else p.name


def _with_links(form: FormDocument, links) -> FormDocument:
    links = tuple((int(q), int(a)) for q, a in links)
    per = {e.id: [] for e in form.entities}
    for q, a in links:
        per[q].append((q, a))
        per[a].append((q, a))
    ents = tuple(dataclasses.replace(e, links=tuple(per[e.id])) for e in form.entities)
    return dataclasses.replace(form, entities=ents, links=links)


def _print_report(report) -> None:
    click.echo(report.table())
    for line in report.kv_lines():
        click.echo(line)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def cli(verbose: bool) -> None:
    """MSAU-PAF form understanding: data, training, decoding and evaluation."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )


@cli.command()
@click.option("--split", "splits", multiple=True, required=True, type=click.Path(exists=True, file_okay=False),
              help="Annotation directory (repeatable).")
def stats(splits: tuple[str, ...]) -> None:
    """Corpus statistics per split: forms, words, entities, relations."""
    rows = []
    for d in splits:
        t0 = time.perf_counter()
        s = dataset_stats(f for _, f in load_split(d))
        rows.append((_split_name(d), s, time.perf_counter() - t0))
    head = f"{'split':<12}{'forms':>8}{'words':>10}{'entities':>10}{'relations':>11}"
    click.echo(head)
    for name, s, _ in rows:
        click.echo(f"{name:<12}{s.n_forms:>8}{s.n_words:>10,}{s.n_entities:>10,}{s.n_relations:>11,}")
    for name, s, secs in rows:
        click.echo(" ".join(f"{name}.{k}={v}" for k, v in s.rows()))
        logger.debug("%s parsed in %.3fs", name, secs)


@cli.command()
@click.option("--seed", type=int, required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--mode", type=click.Choice(["easy", "hard"]), default="easy", show_default=True)
@click.option("--n-forms", type=int, default=SynthSpec.n_forms, show_default=True)
@click.option("--rows", type=int, default=SynthSpec.rows, show_default=True)
@click.option("--columns", type=int, default=SynthSpec.columns, show_default=True)
@click.option("--fan-out", type=float, default=SynthSpec.fan_out, show_default=True)
@click.option("--distractor-rate", type=float, default=SynthSpec.distractor_rate, show_default=True)
@click.option("--decoy-rate", type=float, default=SynthSpec.decoy_rate, show_default=True)
@click.option("--prefix", default="synth", show_default=True)
def synth(seed, out, mode, n_forms, rows, columns, fan_out, distractor_rate, decoy_rate, prefix) -> None:
    """Write a deterministic synthetic corpus in the FUNSD schema."""
    try:
        spec = SynthSpec(n_forms=n_forms, rows=rows, columns=columns, fan_out=fan_out,
                         distractor_rate=distractor_rate, mode=mode, decoy_rate=decoy_rate)
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from exc
    paths = write_corpus(generate(seed, spec), out, prefix)
    click.echo(f"wrote {len(paths)} forms to {out}")


@cli.command()
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True, help="Training annotations.")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Run directory.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Config override (repeatable).")
@click.option("--epochs", type=int, help="Shortcut for --set epochs=N.")
@click.option("--seed", type=int, help="Shortcut for --set seed=N.")
def train(data, out, config_path, overrides, epochs, seed) -> None:
    """Train with seeded RMSProp; writes model.mspw, vocab.txt, config.txt, train.log."""
    from .train import train as run_training

    extra = list(overrides)
    if epochs is not None:
        extra.append(f"epochs={epochs}")
    if seed is not None:
        extra.append(f"seed={seed}")
    tcfg, ncfg, weights, _ = load_config(config_path, tuple(extra))
    forms = [f for _, f in _forms(data)]
    result = run_training(forms, tcfg, ncfg, weights, out_dir=out)
    click.echo(f"trained {len(result.history)} epochs; checkpoint {Path(out) / 'model.mspw'}")


def _run_config(run: str, config_path: str | None, overrides: tuple[str, ...]):
    cfg_file = Path(run) / "config.txt"
    base = read_kv(cfg_file) if cfg_file.exists() else {}
    # keys saved by training are trusted; user keys are checked strictly
    load_config(config_path, overrides)
    return load_config(config_path, overrides, base=base)


@cli.command("decode")
@click.option("--run", type=click.Path(file_okay=False), required=True, help="Training run directory.")
@click.option("--input", "input_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
def decode_cmd(run, input_dir, out, config_path, overrides) -> None:
    """Decode forms with a trained checkpoint into FUNSD-schema predictions."""
    from .train import load_model, predict

    _, ncfg, _, dcfg = _run_config(run, config_path, overrides)
    model, vocab, _ = load_model(run, ncfg)
    named = _forms(input_dir)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    preds = predict(model, vocab, [f for _, f in named], dcfg)
    for (name, form), pred in zip(named, preds):
        (out_dir / f"{name}.json").write_bytes(pred.to_json(form.page_width, form.page_height))
    click.echo(f"decoded {len(named)} forms to {out}")


def _paired(pred_dir: str, gt_dir: str):
    gts = _forms(gt_dir)
    preds = dict(load_split(pred_dir))
    for name, gt in gts:
        pred = preds.get(name)
        if pred is None:
            logger.warning("no prediction for %s; scoring it as empty", name)
            pred = FormDocument(gt.page_width, gt.page_height, (), ())
        yield name, pred, gt


@cli.command("eval")
@click.option("--pred", "pred_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--gt", "gt_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--iou", "threshold", type=click.FloatRange(0, 1, min_open=True), default=0.8, show_default=True)
@click.option("--class-agnostic", is_flag=True, help="Match boxes on IoU alone; labels then decide correctness.")
def eval_cmd(pred_dir, gt_dir, threshold, class_agnostic) -> None:
    """Labeling F1 at an IoU threshold and linking F1."""
    _print_report(evaluate(list(_paired(pred_dir, gt_dir)), threshold, class_agnostic))


@cli.command("link-heuristic")
@click.option("--input", "input_dir", type=click.Path(exists=True, file_okay=False), required=True,
              help="Annotations (--labels gt) or decoded predictions (--labels pred).")
@click.option("--labels", type=click.Choice(["gt", "pred"]), default="gt", show_default=True)
@click.option("--gt", "gt_dir", type=click.Path(exists=True, file_okay=False),
              help="Ground truth for scoring predicted entities (required with --labels pred).")
@click.option("--metric", type=click.Choice(["center", "nearest-edge"]), default="center", show_default=True)
@click.option("--iou", "threshold", type=click.FloatRange(0, 1, min_open=True), default=0.8, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), help="Also write the linked forms here.")
def link_heuristic(input_dir, labels, gt_dir, metric, threshold, out) -> None:
    """Nearest-question linking baseline on ground-truth or predicted entities."""
    from .funsd_io import write_form

    if labels == "pred" and gt_dir is None:
        raise click.UsageError("--labels pred needs --gt")
    triples = []
    if labels == "gt":
        for name, gt in _forms(input_dir):
            triples.append((name, _with_links(gt, heuristic_link(gt.entities, metric)), gt))
    else:
        for name, pred, gt in _paired(input_dir, gt_dir):
            triples.append((name, _with_links(pred, heuristic_link(pred.entities, metric)), gt))
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        for name, linked, _ in triples:
            write_form(linked, Path(out) / f"{name}.json")
    _print_report(evaluate(triples, threshold))


@cli.command()
@click.option("--input", "input_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--run", type=click.Path(file_okay=False), help="Draw keypoint heat predicted by this run.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
def render(input_dir, out, run, config_path, overrides) -> None:
    """One SVG per form: char-grid, class masks, keypoint heat and links.

    Without --run the heat shows the encoded keypoint targets.
    """
    import torch

    from .train import batch_inputs, load_model

    if run is not None:
        _, ncfg, _, dcfg = _run_config(run, config_path, overrides)
        model, vocab, ncfg = load_model(run, ncfg)
        model.eval()
    else:
        _, ncfg, _, dcfg = load_config(config_path, overrides)
        model = vocab = None
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    named = _forms(input_dir)
    for name, form in named:
        v = vocab if vocab is not None else build_vocab([form])
        grid = rasterize(form, v, dcfg.target_median_height)
        geom = GridGeometry(grid.height, grid.width, grid.scale, ncfg.field_stride)
        if model is not None:
            with torch.no_grad():
                pif = model(batch_inputs([grid], v.n_char)).pif[0, :, 0].numpy()
            heat = sigmoid(pif).max(axis=0)
        else:
            heat = encode_targets(form, geom).pif.conf.max(axis=0)
        svg = render_svg(form, grid, v, heat, geom.field_scale)
        (out_dir / f"{name}.svg").write_text(svg, encoding="utf-8")
    click.echo(f"rendered {len(named)} forms to {out}")


def main(argv: list[str] | None = None) -> int:
    from .train import TrainingAborted

    try:
        cli.main(args=argv, prog_name="msaupaf", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_RUNTIME
    except click.ClickException as exc:
        exc.show()
        return EXIT_INVALID
    except (ParseError, ValidationError, ConfigError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_INVALID
    except TrainingAborted as exc:
        click.echo(f"training aborted: {exc}; last checkpoint retained", err=True)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - map every other failure to the runtime exit code
        logger.debug("runtime error", exc_info=True)
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        return EXIT_RUNTIME
    return EXIT_OK


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
