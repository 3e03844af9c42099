//! Parameter naming, shapes and initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::midi_token::{TrackRole, N_TRACKS, VOCAB_SIZE};
use crate::numerics::{ParamId, ParamStore, Tensor};

use super::ModelConfig;

#[derive(Clone, Copy, Debug)]
pub(crate) struct LnIds {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub out: LinearIds,
    /// Relative table `r`, content bias `u`, position bias `v`.
    pub rel: Option<(ParamId, ParamId, ParamId)>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FfnIds {
    pub up: LinearIds,
    pub down: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncLayerIds {
    pub ln1: LnIds,
    pub attn: AttnIds,
    pub ln2: LnIds,
    pub ffn: FfnIds,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecLayerIds {
    pub ln1: LnIds,
    pub self_attn: AttnIds,
    pub ln2: LnIds,
    pub src_attn: AttnIds,
    pub ln3: LnIds,
    pub ffn: FfnIds,
}

#[derive(Clone, Debug)]
pub(crate) struct TrackIds {
    pub embed: ParamId,
    pub enc_layers: Vec<EncLayerIds>,
    pub enc_ln: LnIds,
    pub bard: LinearIds,
    pub decomp: LinearIds,
    pub dec_layers: Vec<DecLayerIds>,
    pub dec_ln: LnIds,
    pub head: LinearIds,
}

#[derive(Clone, Debug)]
pub(crate) struct AeIds {
    pub tracks: Vec<TrackIds>,
    pub comp: LinearIds,
    pub barc: LinearIds,
    pub songc: LinearIds,
    pub songc_ln: LnIds,
    pub songd_pos: ParamId,
    pub songd: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DiscIds {
    pub l1: LinearIds,
    pub l2: LinearIds,
    pub out: LinearIds,
}

enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

struct Builder<'a> {
    store: &'a mut ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0f64, std).expect("positive std");
                (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect()
            }
        };
        self.store.insert(
            name,
            Tensor::new(shape.to_vec(), data).expect("shape matches"),
        )
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIds {
        LnIds {
            g: self.add(format!("{prefix}.g"), &[d], Init::Ones),
            b: self.add(format!("{prefix}.b"), &[d], Init::Zeros),
        }
    }

    fn linear_std(&mut self, prefix: &str, d_in: usize, d_out: usize, std: f64) -> LinearIds {
        LinearIds {
            w: self.add(format!("{prefix}.w"), &[d_in, d_out], Init::Normal(std)),
            b: self.add(format!("{prefix}.b"), &[d_out], Init::Zeros),
        }
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> LinearIds {
        self.linear_std(prefix, d_in, d_out, 1.0 / (d_in as f64).sqrt())
    }

    fn attn(&mut self, prefix: &str, d: usize, rel_rows: Option<usize>) -> AttnIds {
        let std = 1.0 / (d as f64).sqrt();
        AttnIds {
            wq: self.add(format!("{prefix}.wq"), &[d, d], Init::Normal(std)),
            wk: self.add(format!("{prefix}.wk"), &[d, d], Init::Normal(std)),
            wv: self.add(format!("{prefix}.wv"), &[d, d], Init::Normal(std)),
            out: self.linear(&format!("{prefix}.out"), d, d),
            rel: rel_rows.map(|rows| {
                (
                    self.add(format!("{prefix}.r"), &[rows, d], Init::Normal(std)),
                    self.add(format!("{prefix}.u"), &[d], Init::Zeros),
                    self.add(format!("{prefix}.v"), &[d], Init::Zeros),
                )
            }),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) -> FfnIds {
        FfnIds {
            up: self.linear(&format!("{prefix}.up"), d, d_ff),
            down: self.linear(&format!("{prefix}.down"), d_ff, d),
        }
    }
}

/// Builds the autoencoder parameters in canonical order.
pub(crate) fn build_autoencoder(cfg: &ModelConfig, seed: u64) -> (AeIds, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let mut b = Builder {
        store: &mut store,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let d = cfg.d_model;
    let rel_rows = 2 * cfg.seq_len - 1;

    let mut encoders = Vec::with_capacity(N_TRACKS);
    for role in TrackRole::ALL {
        let p = format!("enc.{}", role.key());
        let embed = b.add(
            format!("{p}.embed"),
            &[VOCAB_SIZE, d],
            Init::Normal(1.0 / (d as f64).sqrt()),
        );
        let layers = (0..cfg.n_layers)
            .map(|k| {
                let lp = format!("{p}.layer{k}");
                EncLayerIds {
                    ln1: b.ln(&format!("{lp}.ln1"), d),
                    attn: b.attn(&format!("{lp}.attn"), d, Some(rel_rows)),
                    ln2: b.ln(&format!("{lp}.ln2"), d),
                    ffn: b.ffn(&format!("{lp}.ffn"), d, cfg.d_ff),
                }
            })
            .collect::<Vec<_>>();
        let ln = b.ln(&format!("{p}.ln_f"), d);
        encoders.push((embed, layers, ln));
    }

    let comp = b.linear("comp", d, cfg.n_z);
    let barc = b.linear("barc", N_TRACKS * cfg.n_z, cfg.n_z);
    let songc = b.linear("songc", cfg.n_measures * cfg.n_z, cfg.n_z);
    let songc_ln = b.ln("songc.ln", cfg.n_z);
    let songd_pos = b.add(
        "songd.pos".into(),
        &[cfg.n_measures, cfg.n_z],
        Init::Normal(1.0),
    );
    let songd = b.linear("songd", 2 * cfg.n_z, cfg.n_z);

    let chunk = cfg.n_z / N_TRACKS;
    let bards: Vec<LinearIds> = TrackRole::ALL
        .iter()
        .map(|r| b.linear(&format!("bard.{}", r.key()), chunk, cfg.n_z))
        .collect();

    let mut tracks = Vec::with_capacity(N_TRACKS);
    for (t, role) in TrackRole::ALL.iter().enumerate() {
        let p = format!("dec.{}", role.key());
        let decomp = b.linear(&format!("{p}.decomp"), cfg.n_z, cfg.l_mem * d);
        let dec_layers = (0..cfg.n_layers)
            .map(|k| {
                let lp = format!("{p}.layer{k}");
                DecLayerIds {
                    ln1: b.ln(&format!("{lp}.ln1"), d),
                    self_attn: b.attn(&format!("{lp}.self_attn"), d, Some(rel_rows)),
                    ln2: b.ln(&format!("{lp}.ln2"), d),
                    src_attn: b.attn(&format!("{lp}.src_attn"), d, None),
                    ln3: b.ln(&format!("{lp}.ln3"), d),
                    ffn: b.ffn(&format!("{lp}.ffn"), d, cfg.d_ff),
                }
            })
            .collect();
        let dec_ln = b.ln(&format!("{p}.ln_f"), d);
        let head = b.linear_std(&format!("{p}.head"), d, VOCAB_SIZE, 0.1 / (d as f64).sqrt());
        let (embed, enc_layers, enc_ln) = encoders[t].clone();
        tracks.push(TrackIds {
            embed,
            enc_layers,
            enc_ln,
            bard: bards[t],
            decomp,
            dec_layers,
            dec_ln,
            head,
        });
    }

    (
        AeIds {
            tracks,
            comp,
            barc,
            songc,
            songc_ln,
            songd_pos,
            songd,
        },
        store,
    )
}

pub(crate) fn build_discriminator(cfg: &ModelConfig, seed: u64) -> (DiscIds, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let mut b = Builder {
        store: &mut store,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let h = cfg.disc_hidden;
    let ids = DiscIds {
        l1: b.linear("disc.l1", cfg.n_z, h),
        l2: b.linear("disc.l2", h, h),
        out: b.linear_std("disc.out", h, 1, 0.1 / (h as f64).sqrt()),
    };
    (ids, store)
}
