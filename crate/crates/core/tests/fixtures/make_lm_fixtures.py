"""Builds tiny random masked-LM checkpoints and reference outputs.

The checkpoints exercise the Rust encoder and tokenizers; the JSON files hold
token ids, mask-position hidden states and top-k predictions computed with
the reference implementation. Run from this directory:

    python make_lm_fixtures.py
"""

import json
import os

import torch
from transformers import (
    BertConfig,
    BertForMaskedLM,
    BertTokenizer,
    RobertaConfig,
    RobertaForMaskedLM,
    RobertaTokenizer,
)

WORDS = """the a of to in is was and moved born died lives capital city
paris london berlin rome tokyo bach mozart einstein newton darwin germany
france italy japan england person year 1685 1756 1879 1642 1809 composer
physicist scientist returned return at from for by with un ##aff ##able
new york . , ' s""".split()

PROMPTS = [
    ["tail", "bach", "moved to"],
    ["tail", "Mozart", "was born in"],
    ["head", "paris", "is the capital of"],
    ["tail", "einstein", "unaffable returned to the city of"],
    ["head", "new york", "lives in"],
]

torch.manual_seed(0)
HERE = os.path.dirname(os.path.abspath(__file__))


def reference(model, tok, mask_first, np_, rp, bos, eos, mask, lead):
    np_, rp = np_.lower(), rp.lower()
    enc = lambda s: tok.encode(s, add_special_tokens=False)
    if mask_first:
        ids = [bos, mask] + enc(lead + rp) + enc(lead + np_) + [eos]
        pos = 1
    else:
        ids = [bos] + enc(np_) + enc(lead + rp) + [mask, eos]
        pos = len(ids) - 2
    with torch.no_grad():
        out = model(torch.tensor([ids]), output_hidden_states=True)
    hidden = out.hidden_states[-1][0, pos]
    logits = out.logits[0, pos]
    top = torch.topk(logits, 5)
    return {
        "ids": ids,
        "mask_pos": pos,
        "hidden": [float(x) for x in hidden],
        "top_ids": [int(i) for i in top.indices],
        "top_scores": [float(x) for x in top.values],
    }


def build_bert():
    out = os.path.join(HERE, "tiny-bert")
    os.makedirs(out, exist_ok=True)
    vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"] + WORDS
    with open(os.path.join(out, "vocab.txt"), "w") as f:
        f.write("\n".join(vocab) + "\n")
    cfg = BertConfig(
        vocab_size=len(vocab),
        hidden_size=16,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=32,
        max_position_embeddings=32,
        type_vocab_size=2,
        initializer_range=0.5,
    )
    model = BertForMaskedLM(cfg).eval()
    model.save_pretrained(out, safe_serialization=True)
    tok = BertTokenizer(os.path.join(out, "vocab.txt"), do_lower_case=True)
    tok.save_pretrained(out)
    os.remove(os.path.join(out, "tokenizer.json"))
    refs = [
        dict(direction=d, np=n, rp=r, **reference(model, tok, d == "head", n, r, tok.cls_token_id, tok.sep_token_id, tok.mask_token_id, ""))
        for d, n, r in PROMPTS
    ]
    with open(os.path.join(HERE, "tiny-bert.reference.json"), "w") as f:
        json.dump(refs, f, indent=1)


def bytes_to_unicode():
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(0xA1, 0xAD)) + list(range(0xAE, 0x100))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


def build_roberta():
    out = os.path.join(HERE, "tiny-roberta")
    os.makedirs(out, exist_ok=True)
    table = bytes_to_unicode()
    vocab = {t: i for i, t in enumerate(["<s>", "<pad>", "</s>", "<unk>"])}
    for c in sorted(set(table.values())):
        vocab.setdefault(c, len(vocab))
    merges = []

    def add_word(w):
        parts = [table[b] for b in w.encode()]
        while len(parts) > 1:
            merged = parts[0] + parts[1]
            if (parts[0], parts[1]) not in merges:
                merges.append((parts[0], parts[1]))
            vocab.setdefault(merged, len(vocab))
            parts = [merged] + parts[2:]

    for w in WORDS:
        if not w.startswith("##"):
            add_word(" " + w)
            add_word(w)
    vocab["<mask>"] = len(vocab)
    with open(os.path.join(out, "vocab.json"), "w") as f:
        json.dump(vocab, f, ensure_ascii=False)
    with open(os.path.join(out, "merges.txt"), "w") as f:
        f.write("#version: 0.2\n" + "".join(f"{a} {b}\n" for a, b in merges))
    cfg = RobertaConfig(
        vocab_size=len(vocab),
        hidden_size=16,
        num_hidden_layers=2,
        num_attention_heads=4,
        intermediate_size=32,
        max_position_embeddings=40,
        type_vocab_size=1,
        initializer_range=0.5,
        pad_token_id=1,
        bos_token_id=0,
        eos_token_id=2,
    )
    model = RobertaForMaskedLM(cfg).eval()
    model.save_pretrained(out, safe_serialization=True)
    tok = RobertaTokenizer(os.path.join(out, "vocab.json"), os.path.join(out, "merges.txt"))
    refs = [
        dict(direction=d, np=n, rp=r, **reference(model, tok, d == "head", n, r, tok.bos_token_id, tok.eos_token_id, tok.mask_token_id, " "))
        for d, n, r in PROMPTS
    ]
    with open(os.path.join(HERE, "tiny-roberta.reference.json"), "w") as f:
        json.dump(refs, f, indent=1)


if __name__ == "__main__":
    build_bert()
    build_roberta()
