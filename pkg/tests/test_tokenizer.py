import pytest
import torch

from worldflow.tokenizer import TextEmbedder, VideoTokenizer


def test_round_trip_exact(tokenizer):
    video = torch.rand(17, 3, 16, 16)
    assert torch.equal(tokenizer.decode(tokenizer.encode(video)), video)


def test_single_frame_round_trip(tokenizer):
    frame = torch.rand(1, 3, 32, 32)
    latent = tokenizer.encode(frame)
    assert latent.shape == (1, 768, 4, 4)
    assert torch.equal(tokenizer.decode(latent), frame)


def test_93_frames_map_to_24_latent(tokenizer):
    assert tokenizer.latent_frames(93) == 24
    assert tokenizer.pixel_frames(24) == 93
    video = torch.rand(93, 3, 32, 32)
    latent = tokenizer.encode(video)
    assert latent.shape == (24, 3 * 4 * 64, 4, 4)
    assert torch.equal(tokenizer.decode(latent), video)


@pytest.mark.parametrize("frames", [0, 2, 4, 6, 92])
def test_invalid_frame_counts_rejected(tokenizer, frames):
    with pytest.raises(ValueError):
        tokenizer.latent_frames(frames)


def test_indivisible_spatial_rejected(tokenizer):
    with pytest.raises(ValueError):
        tokenizer.encode(torch.rand(1, 3, 12, 16))


def test_latent_channel_arithmetic(tokenizer):
    assert tokenizer.latent_channels(3) == 768
    assert tokenizer.latent_channels(1) == 256


def test_text_embedder_deterministic():
    emb = TextEmbedder(width=1024)
    a = emb.embed("a red square moving right")
    b = emb.embed("a red square moving right")
    assert torch.equal(a, b)
    assert a.shape == (5, 1024)


def test_text_embedder_token_wise():
    emb = TextEmbedder(width=64)
    ab = emb.embed("hello world")
    a = emb.embed("hello")
    assert torch.equal(ab[0], a[0])
    assert not torch.equal(ab[0], ab[1])


def test_text_embedder_empty_prompt():
    emb = TextEmbedder(width=64)
    assert emb.embed("").shape == (1, 64)
