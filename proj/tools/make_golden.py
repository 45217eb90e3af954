"""Reference forwards from Hugging Face transformers for the loader/forward tests.

Writes tests/data/golden/<arch>/{config.json, model.safetensors, golden.json}
for a tiny randomly initialised GPT-2 and Llama. golden.json holds the input
tokens, every block output, the final logits and the attention of each head.

    python tools/make_golden.py tests/data/golden
"""

import json
import sys
from pathlib import Path

import torch
from transformers import GPT2Config, GPT2LMHeadModel, LlamaConfig, LlamaForCausalLM


def dump(model, out: Path, tokens, n_layers):
    out.mkdir(parents=True, exist_ok=True)
    model.save_pretrained(out, safe_serialization=True)
    for extra in ("generation_config.json",):
        p = out / extra
        if p.exists():
            p.unlink()
    with torch.no_grad():
        res = model(
            torch.tensor([tokens]),
            output_hidden_states=True,
            output_attentions=True,
        )
    # HF applies the final norm to the last hidden state; every earlier entry
    # is a raw block output.
    hidden = [h[0].tolist() for h in res.hidden_states[:n_layers]]
    golden = {
        "tokens": tokens,
        "hidden": hidden,
        "logits": res.logits[0].tolist(),
        "attentions": [a[0].tolist() for a in res.attentions],
    }
    (out / "golden.json").write_text(json.dumps(golden))


def reinit(model, std):
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "norm" in name or "ln_" in name:
                p.copy_(1.0 + 0.3 * torch.randn_like(p) if name.endswith("weight") else 0.3 * torch.randn_like(p))
            else:
                p.normal_(0.0, std)


def main():
    root = Path(sys.argv[1] if len(sys.argv) > 1 else "tests/data/golden")
    torch.manual_seed(1234)
    tokens = torch.randint(0, 96, (14,)).tolist()

    gcfg = GPT2Config(
        vocab_size=96,
        n_positions=32,
        n_embd=24,
        n_layer=3,
        n_head=3,
        activation_function="gelu_new",
        bos_token_id=0,
        eos_token_id=0,
        attn_implementation="eager",
    )
    gpt2 = GPT2LMHeadModel(gcfg).eval()
    reinit(gpt2, 0.3)
    dump(gpt2, root / "gpt2", tokens, gcfg.n_layer)

    lcfg = LlamaConfig(
        vocab_size=96,
        hidden_size=24,
        intermediate_size=40,
        num_hidden_layers=3,
        num_attention_heads=3,
        num_key_value_heads=3,
        max_position_embeddings=32,
        rms_norm_eps=1e-6,
        tie_word_embeddings=False,
        attn_implementation="eager",
    )
    llama = LlamaForCausalLM(lcfg).eval()
    reinit(llama, 0.3)
    dump(llama, root / "llama", tokens, lcfg.num_hidden_layers)


if __name__ == "__main__":
    main()
