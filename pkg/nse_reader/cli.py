import os
import json
import logging
import functools
import click

from nse_reader.util import ReaderError, RejectedInput
from nse_reader.config import PRESETS, resolve_config
from nse_reader.checkpoint import load_checkpoint, save_checkpoint
from nse_reader.data import (SyntheticSpec, generate_synthetic, parse_cbt_file,
                             synthetic_splits, write_cbt_file)
from nse_reader.training import (RunManifest, TrainLog, evaluate, records_csv, restore, train)
from nse_reader.trace import export_trace, trace_example

CHECKPOINT_NAME = "best.ckpt"
LOG_NAME = "train.log.jsonl"
MANIFEST_NAME = "manifest.json"


@click.group()
def cli():
    """ Command line tool to generate cloze datasets, train the hypothesis-test
        reader and inspect what it does.
    """


class ClickHandler(logging.Handler):
    """Sends log records to stderr through click so they follow click's streams"""
    def emit(self, record):
        try:
            click.echo(self.format(record), err=True)
        except Exception:
            self.handleError(record)


def setup_logging(verbose):
    package_logger = logging.getLogger("nse_reader")
    if not any(isinstance(h, ClickHandler) for h in package_logger.handlers):
        handler = ClickHandler()
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        package_logger.addHandler(handler)
    package_logger.setLevel(logging.DEBUG if verbose else logging.INFO)


def reader_errors(function):
    """Turns library errors into a clean exit 1 with the message on stderr"""
    @functools.wraps(function)
    def wrapper(*args, **kw):
        try:
            return function(*args, **kw)
        except ReaderError as e:
            raise click.ClickException(str(e))
        except OSError as e:
            raise click.ClickException("{}: {}".format(e.filename or "", e.strerror or e))
    return wrapper


def read_split(path):
    if not os.path.isfile(path):
        raise click.ClickException("dataset not found: {}".format(path))
    return parse_cbt_file(path, context_lines=None)


def verbose_option(function):
    return click.option("--verbose", "-v", is_flag=True, default=False, help="Debug logging")(function)


@cli.command("gen")
@click.option("--entities", default=20, show_default=True, help="Number of entities")
@click.option("--relations", default=40, show_default=True, help="Number of relation words")
@click.option("--sentences", default=20, show_default=True, help="Sentences per document")
@click.option("--candidates", default=10, show_default=True, help="Candidates per example")
@click.option("--docs", default=2000, show_default=True, help="Training examples")
@click.option("--dev", default=500, show_default=True, help="Dev examples")
@click.option("--test", default=500, show_default=True, help="Test examples")
@click.option("--seed", default=0, show_default=True, help="Random seed")
@click.option("--out", "-o", required=True, help="Output directory")
@click.option("--cache/--no-cache", default=False, help="Reuse splits from the user cache dir")
@reader_errors
def gen(entities, relations, sentences, candidates, docs, dev, test, seed, out, cache):
    """Generate a synthetic cloze dataset in CBT layout

        $ nsereader gen --entities 20 --candidates 5 --docs 2000 --seed 7 -o data/

        Writes train.txt, dev.txt, test.txt and synthetic.json
    """
    setup_logging(False)
    spec = SyntheticSpec(entities=entities, relations=relations, sentences=sentences,
                         candidates=candidates, train=docs, dev=dev, test=test, seed=seed)
    try:
        spec.validate()
    except RejectedInput as e:
        raise click.UsageError(str(e))
    splits = synthetic_splits(spec) if cache else generate_synthetic(spec)
    os.makedirs(out, exist_ok=True)
    for name, examples in zip(("train", "dev", "test"), splits):
        write_cbt_file(os.path.join(out, name + ".txt"), examples)
    with open(os.path.join(out, "synthetic.json"), 'w', encoding='utf-8') as fp:
        json.dump(spec.to_dict(), fp, sort_keys=True, indent=2)
        fp.write("\n")
    click.echo("Saved to : {}".format(out))


@cli.command("train")
@click.option("--train", "train_path", required=True, help="Training split, CBT layout")
@click.option("--dev", "dev_path", required=True, help="Dev split, CBT layout")
@click.option("--config", "config_path", default=None, help="ini file with an [nse] section")
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None, help="Learning rate / batch preset")
@click.option("--out", "-o", default="run", show_default=True, help="Output directory")
@click.option("--seed", type=int, default=None, help="Random seed")
@click.option("--mode", type=click.Choice(["gating", "adaptive"]), default=None, help="Halting strategy")
@click.option("--steps", "-T", type=int, default=None, help="Hypothesis-test steps T")
@click.option("--k", type=int, default=None, help="Memory / state width")
@click.option("--embed-dim", type=int, default=None, help="Word embedding width")
@click.option("--lr", type=float, default=None, help="Adam learning rate")
@click.option("--batch", type=int, default=None, help="Batch size n")
@click.option("--pool-size", type=int, default=None, help="Examples per length-sorted pool, default 32 x batch")
@click.option("--clip", type=float, default=None, help="Gradient clipping threshold")
@click.option("--clip-mode", type=click.Choice(["global", "element"]), default=None)
@click.option("--dropout", type=float, default=None, help="Dropout rate on embeddings")
@click.option("--patience", type=int, default=None, help="Early stopping patience, 0 disables")
@click.option("--epochs", type=int, default=None, help="Maximum epochs")
@click.option("--workers", type=int, default=None, help="Threads per batch")
@click.option("--l2", type=float, default=None, help="L2 weight decay")
@click.option("--min-count", type=int, default=None, help="Vocabulary frequency cut-off")
@verbose_option
@reader_errors
def train_cmd(train_path, dev_path, config_path, preset, out, seed, mode, steps, k, embed_dim, lr,
              batch, pool_size, clip, clip_mode, dropout, patience, epochs, workers, l2, min_count,
              verbose):
    """Train a reader and keep the best dev checkpoint

        $ nsereader train --train data/train.txt --dev data/dev.txt --mode adaptive --steps 12 -o run/

        Writes best.ckpt, manifest.json and train.log.jsonl into the output directory
    """
    setup_logging(verbose)
    try:
        config = resolve_config(preset, config_path, seed=seed, mode=mode, steps=steps, k=k,
                                embed_dim=embed_dim, lr=lr, batch=batch, pool_size=pool_size, clip=clip,
                                clip_mode=clip_mode, dropout=dropout, patience=patience, max_epochs=epochs,
                                workers=workers, l2=l2, min_count=min_count)
    except RejectedInput as e:
        raise click.UsageError(str(e))
    train_examples = read_split(train_path)
    dev_examples = read_split(dev_path)

    os.makedirs(out, exist_ok=True)
    manifest_path = os.path.join(out, MANIFEST_NAME)
    log_path = os.path.join(out, LOG_NAME)
    manifest = RunManifest.create(config, [train_path, dev_path], out)
    manifest.write(manifest_path)
    if os.path.exists(log_path):
        os.remove(log_path)

    record = train(config, train_examples, dev_examples, log=TrainLog(log_path), show_progress=True)
    path = save_checkpoint(os.path.join(out, CHECKPOINT_NAME), record)
    manifest.finish(manifest_path)
    click.echo("best epoch {} dev accuracy {:.4f}".format(record.epoch, record.dev_accuracy))
    click.echo("Saved to : {}".format(path))


@cli.command("eval")
@click.option("--checkpoint", "-c", required=True, help="Checkpoint written by train")
@click.option("--data", "-d", required=True, help="Split to score, CBT layout")
@click.option("--out", "-o", default=None, help="CSV file for per-example records")
@click.option("--batch", default=32, show_default=True, help="Evaluation batch size")
@verbose_option
@reader_errors
def eval_cmd(checkpoint, data, out, batch, verbose):
    """Score a checkpoint on a split

        $ nsereader eval -c run/best.ckpt -d data/test.txt -o test-records.csv
    """
    setup_logging(verbose)
    params, config, vocab = restore(load_checkpoint(checkpoint))
    examples = read_split(data)
    accuracy, records = evaluate(params, vocab.encode_all(examples), config.halting(), batch,
                                 config.cross_initial_states)
    correct = sum(r["correct"] for r in records)
    click.echo("accuracy {:.4f} ({}/{})".format(accuracy, correct, len(records)))
    if out:
        records_csv(records, out)
        click.echo("Saved to : {}".format(out))


@cli.command("trace")
@click.option("--checkpoint", "-c", required=True, help="Checkpoint written by train")
@click.option("--data", "-d", required=True, help="Split holding the example, CBT layout")
@click.option("--index", "-i", default=0, show_default=True, help="Example index in the split")
@click.option("--out", "-o", default="trace", show_default=True, help="Output directory")
@verbose_option
@reader_errors
def trace_cmd(checkpoint, data, index, out, verbose):
    """Export the query regression trace of one example

        $ nsereader trace -c run/best.ckpt -d data/dev.txt -i 3 -o trace/

        Writes z.csv, g.csv (gating) or halting.csv (adaptive), attention.csv,
        an SVG heatmap per grid and trace.json
    """
    setup_logging(verbose)
    params, config, vocab = restore(load_checkpoint(checkpoint))
    examples = read_split(data)
    if not 0 <= index < len(examples):
        raise click.BadParameter("index {} outside 0..{}".format(index, len(examples) - 1),
                                 param_hint="--index")
    trace = trace_example(params, vocab, examples[index], config.halting(), config.cross_initial_states)
    for path in export_trace(trace, out):
        click.echo("Saved to : {}".format(path))
