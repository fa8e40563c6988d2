#![allow(dead_code)]

use nat_prosody::config::RunConfig;

/// A config small enough to train in seconds.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.data.utterances = 12;
    c.data.speakers = 2;
    c.data.mel_bins = 8;
    let a = &mut c.acoustic;
    a.symbol_embedding = 8;
    a.encoder_conv_channels = 8;
    a.encoder_conv_layers = 1;
    a.encoder_rnn = 8;
    a.speaker_embedding = 8;
    a.style_embedding = 8;
    a.style_tokens = 4;
    a.style_token_dim = 4;
    a.style_heads = 2;
    a.style_head_dim = 4;
    a.global_conv_channels = vec![4];
    a.global_rnn = 8;
    a.local_conv_channels = vec![4];
    a.local_rnn = 4;
    a.prenet = vec![8];
    a.attention_rnn = 16;
    a.decoder_rnn = 16;
    a.attention_hidden = 8;
    a.positional_dim = 4;
    a.postnet_channels = 8;
    a.postnet_layers = 2;
    a.duration_rnn = 8;
    a.range_channels = 4;
    c.train.steps = 6;
    c.train.batch_size = 4;
    c.train.knee = 3;
    c.train.log_every = 2;
    c.train.checkpoint_every = 0;
    let s = &mut c.stylepred;
    s.word_embedding = 8;
    s.context_rnn = 8;
    s.global_rnn = 8;
    s.steps = 6;
    s.batch_size = 4;
    s.log_every = 2;
    c
}
