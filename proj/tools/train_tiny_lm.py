"""Trains the small sentiment checkpoint used by the end-to-end acceptance run.

Most training sequences are few-shot prompts whose two label words are drawn
at random from a pool and assigned to the two classes at random, so the
correct answer can only be read off the demonstrations. The remaining
sequences always use " good"/" bad", which teaches sentiment features in the
weights; those two words never appear in the randomized pool, so prompts
labelled with pool words (the evaluation template uses " positive" and
" negative") still need the demonstrations. The result is a
GPT-2 layout checkpoint in Hugging Face format with a byte-level BPE
tokenizer, a template and a held-out dataset:

    python tools/train_tiny_lm.py tests/data/tiny-sentiment-lm

Also writes tokenizer goldens (HF `tokenizers` encodings) next to it in
tests/data/tokenizer/.
"""

import argparse
import json
import random
import time
from pathlib import Path

import torch
from tokenizers import Tokenizer, decoders, models, pre_tokenizers, trainers
from transformers import GPT2Config, GPT2LMHeadModel

POSITIVE = """great wonderful excellent lovely superb delightful charming brilliant fun enjoyable
moving beautiful amazing fantastic pleasant touching clever warm heartfelt gripping""".split()
NEGATIVE = """awful terrible boring dull horrible dreadful tedious clumsy bland lousy
painful ugly annoying weak messy stale tiresome shallow poor lifeless""".split()
NOUNS = """movie film plot story acting script cast ending soundtrack direction
show scene dialogue pacing sequel premise score camera work finale""".split()
ADVERBS = "really quite truly very so rather simply".split()
FILLER = "honestly overall frankly basically again".split()
LABEL_POOL = """positive negative yes no up down red blue cat dog true false left right hot cold
one two alpha beta sun moon apple pear north south green black white gold silver rock paper
king queen river lake tree leaf bird fish horse cow lion tiger bear wolf fox owl
table chair door window house road car bus train plane ship boat city town hill field
bread milk tea rice salt sugar egg cake corn bean fire water earth wind rain snow ice
stone sand glass wood iron steel coal oil gas light dark day night spring summer winter fall
east west start stop open close high low fast slow big small old new first last
hand foot head eye ear nose mouth heart mind book pen song game ball card box bag
star sky cloud storm wave shore coast island mountain valley forest desert garden park farm
mark note sign word name line point group class type kind form shape color sound
zero three four five six seven eight nine ten omega delta gamma sigma theta""".split()
FIXED_WORDS = ["bad", "good"]  # index = label id
FIXED_SHARE = 0.3
LABEL_WEIGHT = 5.0

TEMPLATE = {
    "name": "review-sentiment",
    "input_prefix": "Review:",
    "forerunner": " Sentiment:",
    "unit_suffix": "\n",
    "labels": ["negative", "positive"],
    "label_verbalizer": [" negative", " positive"],
}
BOS = "<|endoftext|>"


def sentence(rng: random.Random, label: int) -> str:
    words = POSITIVE if label == 1 else NEGATIVE
    noun = rng.choice(NOUNS)
    a, b = rng.sample(words, 2)
    forms = [
        f"the {noun} was {a}",
        f"the {noun} was {rng.choice(ADVERBS)} {a}",
        f"a {a} and {b} {noun}",
        f"{rng.choice(FILLER)} the {noun} felt {a}",
        f"what a {a} {noun}",
        f"the {noun} is {a} and {b}",
    ]
    return " " + rng.choice(forms)


def prompt(rng: random.Random, k: int, words: list[str]) -> tuple[str, list[int]]:
    """Returns the prompt text and the label of every unit in order."""
    labels = [rng.randint(0, 1) for _ in range(k + 1)]
    text = ""
    for y in labels:
        text += TEMPLATE["input_prefix"] + sentence(rng, y) + TEMPLATE["forerunner"] + " " + words[y] + TEMPLATE["unit_suffix"]
    return text, labels


def tokenizer_corpus(rng: random.Random) -> list[str]:
    lines = [prompt(rng, 3, rng.sample(LABEL_POOL, 2))[0] for _ in range(3000)]
    lines += [prompt(rng, 3, FIXED_WORDS)[0] for _ in range(500)]
    # Extra text so the merge table covers digits, punctuation and non-ASCII.
    lines += [
        "I'm sure they'll say it's 2024, isn't it? We've got 3.14 and 42!",
        "Café crème, naïve façade, Straße, déjà vu, résumé.",
        "Привет мир, Ελληνικά, 日本語のテキスト, 한국어 문장.",
        "Tabs\tand  double  spaces\n\nnew lines   trailing   ",
        "emoji 🙂🙂 and symbols #$%&*()[]{}<>=+-_/\\|~^`@",
    ] * 50
    return lines


def train_tokenizer(rng: random.Random, vocab_size: int) -> Tokenizer:
    tok = Tokenizer(models.BPE())
    tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    tok.decoder = decoders.ByteLevel()
    trainer = trainers.BpeTrainer(
        vocab_size=vocab_size,
        special_tokens=[BOS],
        initial_alphabet=pre_tokenizers.ByteLevel.alphabet(),
        show_progress=False,
    )
    tok.train_from_iterator(tokenizer_corpus(rng), trainer=trainer)
    for w in LABEL_POOL + FIXED_WORDS:
        ids = tok.encode(" " + w).ids
        if len(ids) != 1:
            raise SystemExit(f"label word ' {w}' is {len(ids)} tokens; raise the vocab size")
    return tok


def save_tokenizer(tok: Tokenizer, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    tok.model.save(str(out))  # vocab.json, merges.txt
    tok.save(str(out / "tokenizer.json"))


def batch(rng, tok, bos_id, label_ids, size, max_k, seq_len):
    xs, ys, ws = [], [], []
    for _ in range(size):
        k = rng.randint(1, max_k)
        words = FIXED_WORDS if rng.random() < FIXED_SHARE else rng.sample(LABEL_POOL, 2)
        text, _ = prompt(rng, k, words)
        ids = [bos_id] + tok.encode(text).ids
        ids = ids[:seq_len + 1]
        x = ids[:-1]
        y = ids[1:]
        # Full LM loss keeps repeated-token structure in the gradient; label
        # tokens get extra weight since those are the positions that need the demos.
        w = [LABEL_WEIGHT if t in label_ids else 1.0 for t in y]
        pad = seq_len - len(x)
        xs.append(x + [bos_id] * pad)
        ys.append(y + [bos_id] * pad)
        ws.append(w + [0.0] * pad)
    return torch.tensor(xs), torch.tensor(ys), torch.tensor(ws)


def evaluate(model, tok, bos_id, rng, n, k, words=("negative", "positive")):
    neg, pos = (tok.encode(" " + w).ids[0] for w in words)
    correct = 0
    for _ in range(n):
        text, labels = prompt(rng, k, list(words))
        ids = [bos_id] + tok.encode(text).ids
        # Drop the query label and trailing newline.
        x = torch.tensor([ids[:-2]])
        with torch.no_grad():
            logits = model(x).logits[0, -1]
        pred = 1 if logits[pos] > logits[neg] else 0
        correct += pred == labels[-1]
    return correct / n


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", type=Path)
    ap.add_argument("--steps", type=int, default=8000)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--dataset-size", type=int, default=400)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    torch.manual_seed(args.seed)
    torch.set_num_threads(1)

    tok = train_tokenizer(rng, vocab_size=1400)
    save_tokenizer(tok, args.out)
    bos_id = tok.token_to_id(BOS)
    label_ids = {tok.encode(" " + w).ids[0] for w in LABEL_POOL + FIXED_WORDS}

    max_k, seq_len = 5, 112
    cfg = GPT2Config(
        vocab_size=tok.get_vocab_size(),
        n_positions=seq_len,
        n_embd=64,
        n_layer=4,
        n_head=4,
        activation_function="gelu_new",
        bos_token_id=bos_id,
        eos_token_id=bos_id,
        attn_implementation="eager",
        resid_pdrop=0.0,
        embd_pdrop=0.0,
        attn_pdrop=0.0,
    )
    model = GPT2LMHeadModel(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=2e-3, weight_decay=0.01)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=2e-3, total_steps=args.steps, pct_start=0.05)
    t0 = time.time()
    for step in range(args.steps):
        model.train()
        x, y, w = batch(rng, tok, bos_id, label_ids, args.batch, max_k, seq_len)
        logits = model(x).logits
        ce = torch.nn.functional.cross_entropy(logits.transpose(1, 2), y, reduction="none")
        loss = (ce * w).sum() / w.sum()
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        sched.step()
        if step % 250 == 0 or step == args.steps - 1:
            model.eval()
            acc = evaluate(model, tok, bos_id, random.Random(999), 200, 4)
            fixed = evaluate(model, tok, bos_id, random.Random(998), 100, 4, FIXED_WORDS)
            print(f"step {step} loss {loss.item():.4f} k4-acc {acc:.3f} fixed-acc {fixed:.3f} {time.time() - t0:.0f}s",
                  flush=True)

    model.eval()
    model.save_pretrained(args.out, safe_serialization=True)
    gen = args.out / "generation_config.json"
    if gen.exists():
        gen.unlink()
    (args.out / "template.json").write_text(json.dumps(TEMPLATE, indent=2) + "\n")
    held_out = random.Random(args.seed + 1)
    with open(args.out / "dataset.jsonl", "w") as f:
        for i in range(args.dataset_size):
            y = i % 2
            f.write(json.dumps({"text": sentence(held_out, y), "label": TEMPLATE["labels"][y]}) + "\n")

    write_tokenizer_goldens(tok, args.out.parent / "tokenizer")


def write_tokenizer_goldens(tok: Tokenizer, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    cases = [
        "",
        "hello world",
        " Review: the movie was great Sentiment: positive\n",
        "I'm sure they'll say it's 2024, isn't it?",
        "We've got 3.14 and 42!  Really?",
        "Café crème, naïve façade, Straße.",
        "Привет мир, Ελληνικά",
        "日本語のテキスト 한국어",
        "Tabs\tand  double  spaces\n\nnew lines   trailing   ",
        "emoji 🙂🙂 and symbols #$%&*()[]{}<>=+-_/\\|~^`@",
        "   leading spaces",
        "a\n\n\nb",
        "x  \n  y",
        "123456789 1,000,000",
        "UPPER lower MiXeD'S 'quoted' \"double\"",
    ]
    golden = [{"text": s, "ids": tok.encode(s).ids} for s in cases]
    (out / "golden.json").write_text(json.dumps(golden, ensure_ascii=False, indent=1) + "\n")
    for name in ("vocab.json", "merges.txt"):
        (out / name).write_bytes((out.parent / "tiny-sentiment-lm" / name).read_bytes())


if __name__ == "__main__":
    main()
