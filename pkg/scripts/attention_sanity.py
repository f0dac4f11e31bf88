"""Where does the responding turn look? Attention mass on the head vs. tail of the leading turn.

    python scripts/attention_sanity.py --checkpoint runs/synth/best.ckpt --dim 32 --pairs 200

Averages the response-to-lead cross-attention over many pairs and compares the mass on
the first and last quarter of leading frames with the uniform share. Heatmaps for the
first few pairs are written to --out.
"""
import argparse
from pathlib import Path

import numpy as np
import torch

from ced.analysis import edge_mass, export_attention
from ced.corpus import SynthConfig, make_turn_pairs, synth_corpus
from ced.model import ModelConfig, build_model, embed_pair, load_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", type=Path, help="trained model; random init if omitted")
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--alpha", type=float, default=0.8)
    ap.add_argument("--pairs", type=int, default=200)
    ap.add_argument("--frac", type=float, default=0.25)
    ap.add_argument("--heatmaps", type=int, default=3)
    ap.add_argument("--out", type=Path, default=Path("runs/attention"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)

    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
    else:
        model = build_model(ModelConfig(input_dim=args.dim, conformer_units=32, transformer_units=16, heads=4,
                                        conformer_ff_units=64, cross_ff_units=32, head_units=16, conv_kernel=7),
                            seed=args.seed)
    model.eval()
    corpus = synth_corpus(SynthConfig(n_sessions=max(1, args.pairs // 9 + 1), alpha=args.alpha,
                                      dim=model.cfg.input_dim, seed=args.seed + 2024))
    pairs = [p for c in corpus for p in make_turn_pairs(c)][: args.pairs]

    heads, tails, uniform = [], [], []
    for i, pair in enumerate(pairs):
        if i < args.heatmaps:
            export_attention(model, pair, args.out, prefix=f"{pair.session_id}_p{pair.index}")
        _, records = embed_pair(model, pair, return_attention=True)
        resp_to_lead = records[-1].weights          # [heads, T_resp, T_lead]
        h, t = edge_mass(resp_to_lead, args.frac)
        k = max(1, int(round(args.frac * resp_to_lead.shape[-1])))
        heads.append(h)
        tails.append(t)
        uniform.append(k / resp_to_lead.shape[-1])
    print(f"{len(pairs)} pairs, frac {args.frac}")
    print(f"  mass on leading-turn head  {np.mean(heads):.3f}")
    print(f"  mass on leading-turn tail  {np.mean(tails):.3f}")
    print(f"  uniform share              {np.mean(uniform):.3f}")


if __name__ == "__main__":
    main()
