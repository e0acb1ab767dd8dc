"""End-to-end orchestration shared by the CLI and the experiment scripts:
corpus preparation (merges, vocabularies, numericalization), training runs,
file-to-file translation, scoring, and the lambda sweep.

Every artifact a run writes (merges, vocabs, metrics, checkpoints,
translations) is a pure function of the inputs and the seed.
"""

from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path

from .bleu import BleuBreakdown, bleu_lines
from .config import RunConfig
from .corpus import load_parallel, numericalize, numericalize_augmented
from .decoding import DecodeConfig, Translator
from .filtering import load_examples
from .model import TransformerParams, load_checkpoint
from .subword import MergeTable, Vocab, apply_bpe, build_vocab, learn_bpe
from .trainer import TrainData, TrainResult, train

log = logging.getLogger(__name__)

SWEEP_HEADER = "lambda1,lambda2,valid_bleu,test_bleu"


def learn_merges(input_paths, num_merges: int, out_path) -> MergeTable:
    """Learn BPE merges over the concatenation of the given text files.

    Passing both sides of a bitext learns joint merges (the default
    convention); passing a single file learns per-side merges.
    """
    corpus = []
    for p in input_paths:
        corpus.extend(Path(p).read_text(encoding="utf-8").splitlines())
    table = learn_bpe(corpus, num_merges)
    table.save(out_path)
    return table


def prepare_data(cfg: RunConfig) -> TrainData:
    """Load bitext, learn or load merges, build vocabs, numericalize."""
    data_cfg = cfg.data
    pairs = load_parallel(data_cfg.train_src, data_cfg.train_tgt)
    valid = load_parallel(data_cfg.valid_src, data_cfg.valid_tgt)

    run_dir = Path(data_cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if data_cfg.merges:
        table = MergeTable.load(data_cfg.merges)
    else:
        table = learn_bpe([p.src for p in pairs] + [p.tgt for p in pairs],
                          data_cfg.num_merges)
    table.save(run_dir / "merges.txt")

    aug_examples = load_examples(data_cfg.augmented) if data_cfg.augmented else []
    src_sentences = [p.src for p in pairs] + [ex.u for ex in aug_examples]
    src_vocab = build_vocab([apply_bpe(s, table) for s in src_sentences],
                            min_freq=data_cfg.min_freq)
    tgt_vocab = build_vocab([apply_bpe(p.tgt, table) for p in pairs],
                            min_freq=data_cfg.min_freq)
    src_vocab.save(run_dir / "src.vocab")
    tgt_vocab.save(run_dir / "tgt.vocab")

    labeled = [numericalize(p, src_vocab, tgt_vocab, table) for p in pairs]
    augmented = None
    if aug_examples:
        augmented = [numericalize_augmented(ex.x, ex.u, ex.y, ex.id,
                                            src_vocab, tgt_vocab, table)
                     for ex in aug_examples]
    return TrainData(labeled=labeled, valid=valid, merge_table=table,
                     src_vocab=src_vocab, tgt_vocab=tgt_vocab, augmented=augmented)


def run_training(cfg: RunConfig) -> TrainResult:
    data = prepare_data(cfg)
    return train(cfg.model, cfg.train, data, run_dir=cfg.data.run_dir)


def load_translator(ckpt_path, decode_cfg: DecodeConfig,
                    merges_path=None, src_vocab_path=None,
                    tgt_vocab_path=None) -> Translator:
    """Build a Translator from a checkpoint; sibling files fill in the
    merges/vocabs when explicit paths are not given."""
    ckpt_path = Path(ckpt_path)
    run_dir = ckpt_path.parent
    params = load_checkpoint(ckpt_path)
    table = MergeTable.load(merges_path or run_dir / "merges.txt")
    src_vocab = Vocab.load(src_vocab_path or run_dir / "src.vocab")
    tgt_vocab = Vocab.load(tgt_vocab_path or run_dir / "tgt.vocab")
    return Translator(params, table, src_vocab, tgt_vocab, decode_cfg)


def translate_file(translator: Translator, in_path, out_path) -> None:
    lines = Path(in_path).read_text(encoding="utf-8").splitlines()
    if translator.decode_cfg.beam_size == 1:
        outputs = translator.translate_batch(lines)
    else:
        outputs = [translator.translate(line) for line in lines]
    Path(out_path).write_text("\n".join(outputs) + "\n", encoding="utf-8")


def score_files(hyp_path, ref_path, smoothing: bool = False) -> BleuBreakdown:
    hyps = Path(hyp_path).read_text(encoding="utf-8").splitlines()
    refs = Path(ref_path).read_text(encoding="utf-8").splitlines()
    return bleu_lines(hyps, refs, smoothing=smoothing)


def evaluate_bleu(translator: Translator, src_path, ref_path,
                  smoothing: bool = False) -> float:
    src = Path(src_path).read_text(encoding="utf-8").splitlines()
    refs = Path(ref_path).read_text(encoding="utf-8").splitlines()
    hyps = (translator.translate_batch(src)
            if translator.decode_cfg.beam_size == 1
            else [translator.translate(s) for s in src])
    return bleu_lines(hyps, refs, smoothing=smoothing).score


SWEEP_GRID = [round(i / 10, 1) for i in range(1, 10)]


def run_lambda_sweep(cfg: RunConfig, out_csv) -> list[str]:
    """Train once per lambda1 in {0.1..0.9} (lambda2 = 1 - lambda1) and score.

    Emits "lambda1,lambda2,valid_bleu,test_bleu" rows, one per grid point,
    all runs sharing the configured seed.
    """
    if not cfg.data.test_src or not cfg.data.test_tgt:
        raise ValueError("sweep requires data.test_src and data.test_tgt")
    base_dir = Path(cfg.data.run_dir)
    rows = []
    for lam1 in SWEEP_GRID:
        lam2 = round(1.0 - lam1, 1)
        sub = replace(
            cfg,
            train=replace(cfg.train, weights=replace(cfg.train.weights,
                                                     lambda1=lam1, lambda2=lam2)),
            data=replace(cfg.data, run_dir=str(base_dir / f"sweep-l1-{lam1}")),
        )
        result = run_training(sub)
        valid_bleu = float(result.metrics_rows[-1].split(",")[6])
        translator = Translator(result.averaged or result.checkpoints[-1].params,
                                *_translator_parts(sub), cfg.decode)
        test_bleu = evaluate_bleu(translator, cfg.data.test_src, cfg.data.test_tgt,
                                  smoothing=True)
        rows.append(f"{lam1},{lam2},{valid_bleu!r},{test_bleu!r}")
        log.info("sweep lambda1=%.1f: valid %.2f test %.2f", lam1, valid_bleu, test_bleu)
    Path(out_csv).write_text("\n".join([SWEEP_HEADER, *rows]) + "\n", encoding="utf-8")
    return rows


def _translator_parts(cfg: RunConfig):
    run_dir = Path(cfg.data.run_dir)
    return (MergeTable.load(run_dir / "merges.txt"),
            Vocab.load(run_dir / "src.vocab"),
            Vocab.load(run_dir / "tgt.vocab"))
