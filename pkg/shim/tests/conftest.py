"""Shared fixture: a tiny randomly initialized causal LM saved to disk.

The model is a one-layer GPT-2 over a 40-token word-level vocabulary,
deterministically seeded, so every test run serves identical distributions.
"""

from __future__ import annotations

import pytest
import torch
from tokenizers import Tokenizer, models, pre_tokenizers
from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

WORDS = (
    ["<unk>", "</s>"]
    + [f"w{i}" for i in range(30)]
    + ["the", "answer", "is", "fact", "Question:", "Answer:", "8849", "Paris"]
)


def build_tiny_model(target_dir: str) -> None:
    vocab = {word: i for i, word in enumerate(WORDS)}
    tokenizer = Tokenizer(models.WordLevel(vocab, unk_token="<unk>"))
    tokenizer.pre_tokenizer = pre_tokenizers.WhitespaceSplit()
    fast = PreTrainedTokenizerFast(
        tokenizer_object=tokenizer,
        unk_token="<unk>",
        eos_token="</s>",
        pad_token="<unk>",
    )
    fast.save_pretrained(target_dir)

    torch.manual_seed(1234)
    config = GPT2Config(
        vocab_size=len(vocab),
        n_positions=128,
        n_embd=32,
        n_layer=1,
        n_head=2,
        bos_token_id=vocab["</s>"],
        eos_token_id=vocab["</s>"],
    )
    model = GPT2LMHeadModel(config)
    model.save_pretrained(target_dir)


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory) -> str:
    target = tmp_path_factory.mktemp("tiny-model")
    build_tiny_model(str(target))
    return str(target)
