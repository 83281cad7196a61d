"""Shared fixture: a tiny causal LM saved to disk, loadable by identifier.

Built entirely in-process (word-level vocabulary, random weights, fixed
seed) so tests run offline and deterministically. Saved with
save_pretrained so the exporter exercises the same AutoModel /
AutoTokenizer path it uses for real checkpoints.
"""

import pytest


VOCAB = {
    "[PAD]": 0,
    "[EOS]": 1,
    "[UNK]": 2,
    "code": 3,
    "marker": 4,
    "the": 5,
    "panel": 6,
    "shows": 7,
    "red": 8,
    "blue": 9,
    "green": 10,
    "square": 11,
    "circle": 12,
    "arrow": 13,
    "near": 14,
    "region": 15,
}


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    import torch
    from tokenizers import Tokenizer
    from tokenizers.models import WordLevel
    from tokenizers.pre_tokenizers import Whitespace
    from transformers import GPT2Config, GPT2Model, PreTrainedTokenizerFast

    out = tmp_path_factory.mktemp("tiny-model")

    backend = Tokenizer(WordLevel(VOCAB, unk_token="[UNK]"))
    backend.pre_tokenizer = Whitespace()
    tokenizer = PreTrainedTokenizerFast(
        tokenizer_object=backend,
        pad_token="[PAD]",
        eos_token="[EOS]",
        unk_token="[UNK]",
    )

    torch.manual_seed(0)
    config = GPT2Config(
        vocab_size=len(VOCAB),
        n_positions=64,
        n_embd=16,
        n_layer=3,
        n_head=2,
    )
    model = GPT2Model(config)
    model.eval()

    tokenizer.save_pretrained(out)
    model.save_pretrained(out)
    return str(out)
