"""Command-line entry point: ``text2cad <subcommand>``.

Exit codes: 0 on success, 1 for data errors, 2 for usage errors.  Errors are
printed to stderr as a single line ``error: <Kind>: <message>``.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
import time
from pathlib import Path

import click

from . import __version__
from .cad import Reason, ValidityReport
from .codec import CadSequence, encode, try_decode
from .config import LEVEL_NAMES, RunConfig, parse_assignments, resolve_config
from .dataset import DatasetManifest, atomic_write, generate_synthetic_dataset, ingest_directory, parse_deepcad_json, write_deepcad_json, write_prompts
from .errors import ConfigError, InvalidityError, Text2CadError

log = logging.getLogger("text2cad")


class DataError(Text2CadError):
    """Unreadable or inconsistent input files."""


def _fail(kind: str, message: str, code: int) -> None:
    click.echo(f"error: {kind}: {' '.join(str(message).split())}", err=True)
    sys.exit(code)


def guarded(fn):
    """Map library exceptions onto the exit-code contract."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(exc.kind, exc, 2)
        except click.UsageError as exc:
            _fail("UsageError", exc.format_message(), 2)
        except Text2CadError as exc:
            _fail(exc.kind, exc, 1)
        except OSError as exc:
            _fail("IoError", f"{exc.filename or ''} {exc.strerror or exc}".strip(), 1)

    return wrapper


def _cfg(ctx: click.Context) -> RunConfig:
    return ctx.obj


def _read_sequence(path: Path) -> CadSequence:
    """A ``.cadseq`` file; unparseable text counts as a malformed stream."""
    try:
        return CadSequence.from_text(path.read_text())
    except (ValueError, UnicodeDecodeError) as exc:
        raise InvalidityError(ValidityReport((Reason.MalformedStructure,)), f"{path}: {exc}") from None


def _load_manifest(cfg: RunConfig, path: str) -> DatasetManifest:
    return DatasetManifest.load(cfg.path(path))


@click.group(context_settings={"help_option_names": ["-h", "--help"], "max_content_width": 100})
@click.option("--config", "config_file", type=click.Path(dir_okay=False), default=None,
              help="Config file (.json or .toml); values are overridden by T2C_* env vars and flags.")
@click.option("--workdir", default=None, help="Root for relative paths (default: current directory).")
@click.option("--seed", type=int, default=None, help="Seed for every random choice (default 0).")
@click.option("--set", "assignments", multiple=True, metavar="KEY=VALUE",
              help="Override any config key, e.g. --set train.lr=0.003. Repeatable.")
@click.option("-v", "--verbose", count=True, help="More logging (-v info, -vv debug).")
@click.version_option(__version__, prog_name="text2cad")
@click.pass_context
def main(ctx, config_file, workdir, seed, assignments, verbose):
    """Text-to-CAD pipeline: synthesize, annotate, train, generate and evaluate."""
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        flags = parse_assignments(list(assignments))
        if workdir is not None:
            flags["workdir"] = workdir
        if seed is not None:
            flags["seed"] = seed
        ctx.obj = resolve_config(config_file, flags=flags)
    except ConfigError as exc:
        _fail(exc.kind, exc, 2)


@main.command()
@click.argument("n", type=click.IntRange(min=1))
@click.argument("out")
@click.pass_context
@guarded
def synth(ctx, n, out):
    """Build a synthetic corpus of N models with prompts under OUT."""
    cfg = _cfg(ctx)
    manifest = generate_synthetic_dataset(n, cfg.seed, cfg.path(out))
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    click.echo(f"wrote {n} samples to {cfg.path(out)} ({', '.join(f'{k} {v}' for k, v in counts.items())})")


@main.command()
@click.argument("json_dir")
@click.argument("out")
@click.pass_context
@guarded
def ingest(ctx, json_dir, out):
    """Parse DeepCAD-style JSON files under JSON_DIR into a corpus under OUT.

    Files that fail to parse are skipped and listed on stderr.
    """
    cfg = _cfg(ctx)
    src = cfg.path(json_dir)
    if not src.is_dir():
        raise click.BadParameter(f"{src} is not a directory", param_hint="JSON_DIR")
    manifest, skipped = ingest_directory(src, cfg.path(out), cfg.seed)
    for line in skipped:
        click.echo(f"skipped: {line}", err=True)
    click.echo(f"ingested {len(manifest.entries)} models, skipped {len(skipped)}")


@main.command()
@click.argument("manifest")
@click.option("--endpoint", default=None,
              help="URL of an external prompt generator; templates are used when unset.")
@click.option("--timeout", type=float, default=None, help="Request timeout in seconds.")
@click.option("--retries", type=int, default=None, help="Retries for transport errors and 5xx replies.")
@click.pass_context
@guarded
def annotate(ctx, manifest, endpoint, timeout, retries):
    """(Re)write the L0-L3 prompt files of every sample in MANIFEST."""
    from .prompts import ExternalGenerator
    from .prompts import annotate as make_prompts

    cfg = _cfg(ctx)
    ann = dict(cfg.annotate)
    for key, value in (("endpoint", endpoint), ("timeout", timeout), ("retries", retries)):
        if value is not None:
            ann[key] = value
    gen = ExternalGenerator(ann["endpoint"], ann["timeout"], ann["retries"]) if ann["endpoint"] else None
    man = _load_manifest(cfg, manifest)
    for entry in man.entries:
        prompts = make_prompts(man.metadata(entry), man.model(entry), gen)
        write_prompts(man.root / entry.prompt_file, prompts)
    click.echo(f"annotated {len(man.entries)} samples ({'external' if gen else 'templates'})")


@main.command("encode")
@click.argument("input", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default=None, help="Output .cadseq file (default: stdout).")
@click.pass_context
@guarded
def encode_cmd(ctx, input, out):
    """Encode a DeepCAD-style JSON model into a token sequence."""
    from .cad import quantize_model

    cfg = _cfg(ctx)
    model = quantize_model(parse_deepcad_json(cfg.path(input).read_bytes()))
    text = encode(model).to_text()
    if out is None:
        click.echo(text, nl=False)
    else:
        atomic_write(cfg.path(out), text)


@main.command("decode")
@click.argument("input", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default=None, help="Write the decoded model as DeepCAD-style JSON.")
@click.pass_context
@guarded
def decode_cmd(ctx, input, out):
    """Decode a .cadseq file and print its validity report as JSON.

    Invalid sequences exit with status 1 and name the failing reasons.
    """
    cfg = _cfg(ctx)
    model, report, detail = try_decode(_read_sequence(cfg.path(input)))
    doc = {"valid": report.valid, "reasons": [r.value for r in report.reasons]}
    if model is not None:
        doc["parts"] = len(model.parts)
    click.echo(json.dumps(doc, sort_keys=True))
    if model is None:
        raise InvalidityError(report, detail)
    if out is not None:
        atomic_write(cfg.path(out), json.dumps(write_deepcad_json(model), indent=1, sort_keys=True) + "\n")


def _training_pairs(man: DatasetManifest, split: str, levels) -> list[tuple[str, CadSequence]]:
    pairs = []
    for entry in man.split(split):
        prompts = man.prompts(entry)
        seq = man.sequence(entry)
        pairs.extend((prompts.level(lv), seq) for lv in levels)
    return pairs


@main.command()
@click.argument("manifest")
@click.argument("out")
@click.option("--epochs", type=click.IntRange(min=0), default=None, help="Total epochs to reach.")
@click.option("--lr", type=float, default=None, help="Learning rate.")
@click.option("--batch-size", type=click.IntRange(min=1), default=None, help="Samples per step.")
@click.option("--levels", default=None, help="Comma-separated prompt levels to pool, e.g. L0,L3.")
@click.option("--resume", "resume_from", default=None, help="Checkpoint to continue from.")
@click.pass_context
@guarded
def train(ctx, manifest, out, epochs, lr, batch_size, levels, resume_from):
    """Train on the train split of MANIFEST; checkpoints and metrics.jsonl go to OUT."""
    from .nn.text import build_text_vocab
    from .nn.train import Trainer, make_samples

    cfg = _cfg(ctx)
    flags = {k: v for k, v in (("epochs", epochs), ("lr", lr), ("batch_size", batch_size), ("levels", levels)) if v is not None}
    if flags:
        cfg = resolve_config(None, environ={}, flags={**cfg.to_dict(), "train": {**cfg.train, **flags}})
    man = _load_manifest(cfg, manifest)
    lv = cfg.train["levels"]
    train_pairs = _training_pairs(man, "train", lv)
    if not train_pairs:
        raise DataError(f"{manifest}: train split is empty")
    out_dir = cfg.path(out)
    tcfg = cfg.train_config()
    if resume_from:
        trainer = Trainer.resume(cfg.path(resume_from), out_dir, tcfg)
        _truncate_metrics(out_dir / "metrics.jsonl", trainer.epoch)
    else:
        vocab = build_text_vocab([t for t, _ in train_pairs])
        trainer = Trainer(cfg.model_config(len(vocab)), tcfg, vocab, out_dir)
        (out_dir / "metrics.jsonl").unlink(missing_ok=True)
    n_p = trainer.model_cfg.N_p
    train_s = make_samples(train_pairs, trainer.vocab, n_p)
    val_s = make_samples(_training_pairs(man, "val", lv), trainer.vocab, n_p)
    start = time.monotonic()
    history = trainer.fit(train_s, val_s)
    last = next((h for h in reversed(history) if h["split"] == "train"), None)
    summary = f"trained to epoch {trainer.epoch} on {len(train_s)} samples in {time.monotonic() - start:.0f}s"
    if last:
        summary += f", loss {last['loss']:.4f}, token accuracy {last['token_accuracy']:.4f}"
    click.echo(summary)


def _truncate_metrics(path: Path, epoch: int) -> None:
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["epoch"] <= epoch]
    atomic_write(path, "".join(ln + "\n" for ln in keep))


@main.command()
@click.argument("checkpoint")
@click.argument("out")
@click.option("--prompt", "prompts", multiple=True, help="Prompt text. Repeatable.")
@click.option("--prompt-file", default=None, help="File with one prompt per line.")
@click.option("--manifest", default=None, help="Generate for every sample of a manifest split.")
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test", show_default=True,
              help="Split used with --manifest.")
@click.option("--level", type=click.Choice(LEVEL_NAMES), default="L3", show_default=True,
              help="Prompt level used with --manifest.")
@click.option("--export", "export_fmt", type=click.Choice(["obj", "stl", "xyz"]), default=None,
              help="Also write a mesh (obj, stl) or surface point cloud (xyz) for each valid result.")
@click.option("--batch-size", type=click.IntRange(min=1), default=32, show_default=True,
              help="Prompts decoded together.")
@click.pass_context
@guarded
def generate(ctx, checkpoint, out, prompts, prompt_file, manifest, split, level, export_fmt, batch_size):
    """Greedy generation into directory OUT, one NAME.cadseq per prompt.

    Names are the sample ids with --manifest and prompt_NNNN otherwise.
    """
    from .nn.train import generate_texts, load_model

    cfg = _cfg(ctx)
    sources = sum(bool(s) for s in (prompts, prompt_file, manifest))
    if sources != 1:
        raise click.UsageError("give exactly one of --prompt, --prompt-file or --manifest")
    if manifest:
        man = _load_manifest(cfg, manifest)
        entries = man.split(split)
        names = [e.id for e in entries]
        texts = [man.prompts(e).level(level) for e in entries]
    else:
        texts = list(prompts) if prompts else [
            ln.strip() for ln in cfg.path(prompt_file).read_text().splitlines() if ln.strip()
        ]
        names = [f"prompt_{i:04d}" for i in range(len(texts))]
    if not texts:
        raise DataError("no prompts to generate from")
    params, vocab = load_model(cfg.path(checkpoint))
    seqs = generate_texts(params, vocab, texts, batch_size)
    out_dir = cfg.path(out)
    valid = exported = 0
    for name, seq in zip(names, seqs):
        atomic_write(out_dir / f"{name}.cadseq", seq.to_text())
        model, _, _ = try_decode(seq)
        if model is None:
            continue
        valid += 1
        if export_fmt and _export(model, out_dir / f"{name}.{export_fmt}", export_fmt, cfg):
            exported += 1
    msg = f"generated {len(seqs)} sequences, {valid} valid"
    if export_fmt:
        msg += f", {exported} exported as {export_fmt}"
    click.echo(msg)


def _export(model, path: Path, fmt: str, cfg: RunConfig) -> bool:
    from .errors import EmptySolid
    from .geometry import export_mesh, extract_surface_points, obj_bytes, stl_bytes, xyz_bytes

    try:
        if fmt == "xyz":
            data = xyz_bytes(extract_surface_points(model, cfg.eval["resolution"], cfg.eval["points"], cfg.seed))
        else:
            mesh = export_mesh(model)
            data = obj_bytes(mesh) if fmt == "obj" else stl_bytes(mesh)
    except EmptySolid as exc:
        log.warning("%s: not exported: %s", path.name, exc)
        return False
    atomic_write(path, data)
    return True


@main.command("eval")
@click.argument("gt_manifest")
@click.argument("pred_dir")
@click.argument("out")
@click.option("--tolerance", type=click.IntRange(min=0), default=None,
              help="Quantized-unit tolerance for primitive and extrusion matches (default 3).")
@click.option("--no-chamfer", is_flag=True, help="Skip the chamfer distance (much faster).")
@click.option("--name", default="model", show_default=True, help="Row label in the printed table.")
@click.pass_context
@guarded
def eval_cmd(ctx, gt_manifest, pred_dir, out, tolerance, no_chamfer, name):
    """Score PRED_DIR/*.cadseq against GT_MANIFEST; writes the report JSON to OUT."""
    from .evaluation import evaluate_corpus

    cfg = _cfg(ctx)
    man = _load_manifest(cfg, gt_manifest)
    pdir = cfg.path(pred_dir)
    if not pdir.is_dir():
        raise click.BadParameter(f"{pdir} is not a directory", param_hint="PRED_DIR")
    preds = {}
    for path in sorted(pdir.glob("*.cadseq")):
        try:
            preds[path.stem] = _read_sequence(path)
        except InvalidityError:
            # unreadable predictions are scored as invalid outputs
            preds[path.stem] = CadSequence([[0, 0]])
    ev = cfg.eval
    report = evaluate_corpus(
        man,
        preds,
        tolerance=ev["tolerance"] if tolerance is None else tolerance,
        resolution=ev["resolution"],
        n_points=ev["points"],
        seed=cfg.seed,
        with_cd=ev["chamfer"] and not no_chamfer,
    )
    atomic_write(cfg.path(out), report.to_json())
    click.echo(report.table(name), nl=False)


@main.command()
@click.option("--params", "n_params", type=click.IntRange(min=1), default=240, show_default=True,
              help="Parameters to check, spread over the selected families.")
@click.option("--family", "families", multiple=True,
              help="Only families whose name contains this text (e.g. ffn, attn). Repeatable.")
@click.option("--tol", type=float, default=1e-3, show_default=True, help="Largest accepted relative error.")
@click.pass_context
@guarded
def gradcheck(ctx, n_params, families, tol):
    """Compare backprop with central finite differences on a tiny model."""
    from .nn.gradcheck import gradient_check

    cfg = _cfg(ctx)
    try:
        res = gradient_check(n_params=n_params, seed=cfg.seed, families=list(families) or None)
    except ValueError as exc:
        raise click.BadParameter(str(exc), param_hint="--family") from None
    for fam, err in sorted(res.per_family.items()):
        click.echo(f"{fam:24s} {err:.3e}")
    click.echo(f"max relative error {res.max_rel_error:.3e} over {res.checked} parameters")
    if not res.passed(tol):
        _fail("GradientMismatch", f"max relative error {res.max_rel_error:.3e} >= {tol:g}", 1)


if __name__ == "__main__":
    main()
