//! Hierarchical autoencoder over token grids and the latent discriminator.
//!
//! Data flow for a batch of `S` songs of `N` measures and 4 tracks:
//!
//! ```text
//! tokens[t]  [S·N·L]      --encoder t-->      h   [S·N·L, d]
//! h          --comp-->    z_{i,t} [S·N, n_z]
//! z_{i,·}    --barc-->    z_i     [S·N, n_z]
//! z_{·}      --songc-->   z       [S, n_z]
//! z          --songd-->   z_i'    [S·N, n_z]
//! z_i'       --bard t-->  z_{i,t}' [S·N, n_z]
//! z_{i,t}'   --decomp t-> memory  [S·N·l_mem, d]
//! memory     --decoder t--> logits [S·N·L, 323]
//! ```
//!
//! Row `s·N + i` of every per-measure tensor belongs to song `s`, measure `i`.
//! Forward functions are generic over the element type so the same graph
//! runs in `f32` for training and `f64` for gradient checks.

pub mod config;
mod layout;

use std::rc::Rc;

use crate::midi_token::{content_len, TokenizedSong, TrackRole, EOS, N_TRACKS, PAD, SOS};
use crate::numerics::{
    attention, AttnSpec, Checkpoint, CheckpointError, Element, NumericsError, ParamStore, Tape,
    Tensor, Var,
};

pub use config::ModelConfig;
use layout::{AeIds, AttnIds, DiscIds, FfnIds, LinearIds, LnIds};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

type Result<T> = std::result::Result<T, ModelError>;

/// Parameters bound to one tape, indexed by `ParamId`.
pub type Bound<'t, T> = [Var<'t, T>];

fn ln<'t, T: Element>(p: &Bound<'t, T>, x: Var<'t, T>, ids: LnIds) -> Result<Var<'t, T>> {
    Ok(x.layer_norm(p[ids.g.0], p[ids.b.0])?)
}

fn lin<'t, T: Element>(p: &Bound<'t, T>, x: Var<'t, T>, ids: LinearIds) -> Result<Var<'t, T>> {
    Ok(x.linear(p[ids.w.0], Some(p[ids.b.0]))?)
}

fn ffn<'t, T: Element>(p: &Bound<'t, T>, x: Var<'t, T>, ids: FfnIds) -> Result<Var<'t, T>> {
    lin(p, lin(p, x, ids.up)?.gelu()?, ids.down)
}

fn mha<'t, T: Element>(
    p: &Bound<'t, T>,
    xq: Var<'t, T>,
    xkv: Var<'t, T>,
    ids: AttnIds,
    spec: AttnSpec,
) -> Result<Var<'t, T>> {
    let q = xq.linear(p[ids.wq.0], None)?;
    let k = xkv.linear(p[ids.wk.0], None)?;
    let v = xkv.linear(p[ids.wv.0], None)?;
    let rel = ids.rel.map(|(r, u, vb)| (p[r.0], p[u.0], p[vb.0]));
    lin(p, attention(q, k, v, rel, spec)?, ids.out)
}

/// Concatenated sequences of track `t`, song-major then measure-major.
pub fn track_inputs(songs: &[TokenizedSong], t: usize) -> Vec<u16> {
    let mut ids = Vec::new();
    for s in songs {
        for i in 0..s.n_measures {
            ids.extend_from_slice(s.sequence(i, t));
        }
    }
    ids
}

/// Next-token targets: `ids[p + 1]` per sequence, pad at the last position.
pub fn shifted_targets(ids: &[u16], seq_len: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(ids.len());
    for seq in ids.chunks(seq_len) {
        out.extend(seq[1..].iter().map(|&t| t as usize));
        out.push(PAD as usize);
    }
    out
}

/// Per-position weights that average the non-pad prefix of each sequence.
fn content_weights<T: Element>(ids: &[u16], seq_len: usize) -> Vec<T> {
    let mut w = vec![T::zero(); ids.len()];
    for (seq, out) in ids.chunks(seq_len).zip(w.chunks_mut(seq_len)) {
        let n = content_len(seq);
        let inv = T::of(1.0 / n as f64);
        out[..n].iter_mut().for_each(|x| *x = inv);
    }
    w
}

fn content_mask(ids: &[u16], seq_len: usize) -> Vec<bool> {
    let mut m = vec![false; ids.len()];
    for (seq, out) in ids.chunks(seq_len).zip(m.chunks_mut(seq_len)) {
        let n = content_len(seq);
        out[..n].iter_mut().for_each(|x| *x = true);
    }
    m
}

/// Everything one teacher-forced pass produces.
pub struct TeacherForced<'t, T: Element> {
    pub z: Var<'t, T>,
    pub memories: Vec<Var<'t, T>>,
    /// Per track, `[S·N·L, 323]`.
    pub logits: Vec<Var<'t, T>>,
    /// Per track, shifted gold ids.
    pub targets: Vec<Vec<usize>>,
    /// Per track, decoder inputs (the gold ids).
    pub inputs: Vec<Vec<u16>>,
}

/// Encoder, compression pyramid, decompression pyramid and decoders.
#[derive(Clone, Debug)]
pub struct AutoEncoder {
    config: ModelConfig,
    ids: AeIds,
}

impl AutoEncoder {
    /// Builds the network and its freshly initialized parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        config.validate()?;
        let (ids, store) = layout::build_autoencoder(&config, seed);
        Ok((AutoEncoder { config, ids }, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Names of the parameters owned by encoder `role` (embedding included).
    pub fn is_encoder_param(name: &str, role: TrackRole) -> bool {
        name.starts_with(&format!("enc.{}.", role.key()))
    }

    pub fn check_songs(&self, songs: &[TokenizedSong]) -> Result<()> {
        for (k, s) in songs.iter().enumerate() {
            if s.n_measures != self.config.n_measures
                || s.seq_len != self.config.seq_len
                || s.n_tracks != N_TRACKS
            {
                return Err(ModelError::Input(format!(
                    "song {k} is {}x{}x{}, model expects {}x{}x{}",
                    s.n_measures,
                    s.n_tracks,
                    s.seq_len,
                    self.config.n_measures,
                    N_TRACKS,
                    self.config.seq_len
                )));
            }
            s.validate()
                .map_err(|e| ModelError::Input(format!("song {k}: {e}")))?;
        }
        Ok(())
    }

    fn check_len(&self, ids: &[u16], n_seq: usize, len: usize) -> Result<()> {
        if ids.len() != n_seq * len || len == 0 || len > self.config.seq_len {
            return Err(ModelError::Input(format!(
                "{} ids for {n_seq} sequences of length {len}",
                ids.len()
            )));
        }
        Ok(())
    }

    /// Encodes `n_seq` sequences of track `role`; output `[n_seq·L, d]`.
    /// Keys after each sequence's end token are masked out.
    pub fn encode_measure_track<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        role: TrackRole,
        ids: &[u16],
        n_seq: usize,
    ) -> Result<Var<'t, T>> {
        let l = self.config.seq_len;
        self.check_len(ids, n_seq, l)?;
        let tr = &self.ids.tracks[role.index()];
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let spec = AttnSpec {
            batch: n_seq,
            q_len: l,
            k_len: l,
            heads: self.config.n_heads,
            causal: false,
            key_mask: Some(content_mask(ids, l)),
        };
        let mut x = p[tr.embed.0].embedding(&idx)?;
        for layer in &tr.enc_layers {
            let h = ln(p, x, layer.ln1)?;
            x = x.add(mha(p, h, h, layer.attn, spec.clone())?)?;
            x = x.add(ffn(p, ln(p, x, layer.ln2)?, layer.ffn)?)?;
        }
        ln(p, x, tr.enc_ln)
    }

    /// Masked mean over time followed by a linear map to `n_z`; `[n_seq, n_z]`.
    pub fn comp<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        h: Var<'t, T>,
        ids: &[u16],
    ) -> Result<Var<'t, T>> {
        let w = content_weights::<T>(ids, self.config.seq_len);
        lin(p, h.weighted_pool(self.config.seq_len, &w)?, self.ids.comp)
    }

    /// `[rows, n_z]` per track → `[rows, n_z]`.
    pub fn bar_compress<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        z_tracks: &[Var<'t, T>],
    ) -> Result<Var<'t, T>> {
        if z_tracks.len() != N_TRACKS {
            return Err(ModelError::Input(format!("{} track codes", z_tracks.len())));
        }
        lin(p, Var::concat(z_tracks, 1)?, self.ids.barc)
    }

    /// `[S·N, n_z]` → `[S, n_z]`.
    pub fn song_compress<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        z_measures: Var<'t, T>,
        n_songs: usize,
    ) -> Result<Var<'t, T>> {
        let c = &self.config;
        let flat = z_measures.reshape(&[n_songs, c.n_measures * c.n_z])?;
        ln(p, lin(p, flat, self.ids.songc)?, self.ids.songc_ln)
    }

    /// `[S, n_z]` → `[S·N, n_z]`: each code repeated per measure, joined
    /// with that measure's position embedding, then projected.
    pub fn song_decompress<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        z: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let n = self.config.n_measures;
        let s = z.shape()[0];
        let rep: Vec<usize> = (0..s).flat_map(|k| std::iter::repeat_n(k, n)).collect();
        let pos: Vec<usize> = (0..s).flat_map(|_| 0..n).collect();
        let joined = Var::concat(
            &[
                z.gather_rows(&rep)?,
                p[self.ids.songd_pos.0].gather_rows(&pos)?,
            ],
            1,
        )?;
        lin(p, joined, self.ids.songd)
    }

    /// Projects the `role` chunk of each measure code; `[rows, n_z]`.
    pub fn bar_decompress<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        z_measures: Var<'t, T>,
        role: TrackRole,
    ) -> Result<Var<'t, T>> {
        let chunk = self.config.n_z / N_TRACKS;
        let part = z_measures.narrow(1, role.index() * chunk, chunk)?;
        lin(p, part, self.ids.tracks[role.index()].bard)
    }

    /// `[rows, n_z]` → memory `[rows·l_mem, d]`.
    pub fn decomp<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        z_track: Var<'t, T>,
        role: TrackRole,
    ) -> Result<Var<'t, T>> {
        let rows = z_track.shape()[0];
        let m = lin(p, z_track, self.ids.tracks[role.index()].decomp)?;
        Ok(m.reshape(&[rows * self.config.l_mem, self.config.d_model])?)
    }

    /// Decoder logits `[n_seq·len, 323]` for `n_seq` input prefixes of
    /// length `len`; position `q` sees inputs `0..=q` and its memory.
    pub fn decode<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        role: TrackRole,
        memory: Var<'t, T>,
        inputs: &[u16],
        n_seq: usize,
        len: usize,
    ) -> Result<Var<'t, T>> {
        self.check_len(inputs, n_seq, len)?;
        let c = &self.config;
        if memory.shape() != [n_seq * c.l_mem, c.d_model] {
            return Err(ModelError::Input(format!(
                "memory {:?} for {n_seq} sequences",
                memory.shape()
            )));
        }
        let tr = &self.ids.tracks[role.index()];
        let idx: Vec<usize> = inputs.iter().map(|&t| t as usize).collect();
        let self_spec = AttnSpec {
            batch: n_seq,
            q_len: len,
            k_len: len,
            heads: c.n_heads,
            causal: true,
            key_mask: None,
        };
        let src_spec = AttnSpec {
            batch: n_seq,
            q_len: len,
            k_len: c.l_mem,
            heads: c.n_heads,
            causal: false,
            key_mask: None,
        };
        let mut x = p[tr.embed.0].embedding(&idx)?;
        for layer in &tr.dec_layers {
            let h = ln(p, x, layer.ln1)?;
            x = x.add(mha(p, h, h, layer.self_attn, self_spec.clone())?)?;
            let h = ln(p, x, layer.ln2)?;
            x = x.add(mha(p, h, memory, layer.src_attn, src_spec.clone())?)?;
            x = x.add(ffn(p, ln(p, x, layer.ln3)?, layer.ffn)?)?;
        }
        lin(p, ln(p, x, tr.dec_ln)?, tr.head)
    }

    /// Song codes `[S, n_z]`.
    pub fn encode_songs<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        songs: &[TokenizedSong],
    ) -> Result<Var<'t, T>> {
        self.check_songs(songs)?;
        if songs.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let rows = songs.len() * self.config.n_measures;
        let mut z_tracks = Vec::with_capacity(N_TRACKS);
        for role in TrackRole::ALL {
            let ids = track_inputs(songs, role.index());
            let h = self.encode_measure_track(p, role, &ids, rows)?;
            z_tracks.push(self.comp(p, h, &ids)?);
        }
        let z_measures = self.bar_compress(p, &z_tracks)?;
        self.song_compress(p, z_measures, songs.len())
    }

    /// Per-track decoder memories for codes `[S, n_z]`.
    pub fn memories<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        z: Var<'t, T>,
    ) -> Result<Vec<Var<'t, T>>> {
        let z_measures = self.song_decompress(p, z)?;
        TrackRole::ALL
            .iter()
            .map(|&role| {
                let zt = self.bar_decompress(p, z_measures, role)?;
                self.decomp(p, zt, role)
            })
            .collect()
    }

    /// Full teacher-forced pass.
    pub fn teacher_forced<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        songs: &[TokenizedSong],
    ) -> Result<TeacherForced<'t, T>> {
        let z = self.encode_songs(p, songs)?;
        let memories = self.memories(p, z)?;
        let l = self.config.seq_len;
        let rows = songs.len() * self.config.n_measures;
        let mut logits = Vec::with_capacity(N_TRACKS);
        let mut targets = Vec::with_capacity(N_TRACKS);
        let mut inputs = Vec::with_capacity(N_TRACKS);
        for role in TrackRole::ALL {
            let ids = track_inputs(songs, role.index());
            logits.push(self.decode(p, role, memories[role.index()], &ids, rows, l)?);
            targets.push(shifted_targets(&ids, l));
            inputs.push(ids);
        }
        Ok(TeacherForced {
            z,
            memories,
            logits,
            targets,
            inputs,
        })
    }

    /// Song codes computed without keeping a graph.
    pub fn encode_values(
        &self,
        params: &ParamStore<f32>,
        songs: &[TokenizedSong],
    ) -> Result<Tensor<f32>> {
        let tape = Tape::new();
        let p = params.bind(&tape);
        let z = self.encode_songs(&p, songs)?;
        Ok((*z.value()).clone())
    }

    /// Teacher-forced logits per track, `[S·N·L, 323]`.
    pub fn teacher_forced_values(
        &self,
        params: &ParamStore<f32>,
        songs: &[TokenizedSong],
    ) -> Result<Vec<Tensor<f32>>> {
        let tape = Tape::new();
        let p = params.bind(&tape);
        let tf = self.teacher_forced(&p, songs)?;
        Ok(tf.logits.iter().map(|l| (*l.value()).clone()).collect())
    }

    /// Greedy decoding from codes `[S, n_z]`.
    ///
    /// Each sequence starts at the start token and takes the argmax token
    /// until it emits the end token or reaches the sequence length; the
    /// remainder is padded.
    pub fn decode_greedy(
        &self,
        params: &ParamStore<f32>,
        z: &Tensor<f32>,
    ) -> Result<Vec<TokenizedSong>> {
        let c = self.config;
        if z.rank() != 2 || z.cols() != c.n_z {
            return Err(ModelError::Input(format!("codes {:?}", z.shape())));
        }
        let n_songs = z.rows();
        let rows = n_songs * c.n_measures;
        let l = c.seq_len;
        let memories: Vec<Rc<Tensor<f32>>> = {
            let tape = Tape::new();
            let p = params.bind(&tape);
            let zv = tape.leaf(z.clone());
            self.memories(&p, zv)?.iter().map(|m| m.value()).collect()
        };

        // out[t][b] is the emitted sequence for row b of track t.
        let mut out: Vec<Vec<Vec<u16>>> = Vec::with_capacity(N_TRACKS);
        for role in TrackRole::ALL {
            let mut seqs: Vec<Vec<u16>> = vec![vec![SOS]; rows];
            let mut done = vec![false; rows];
            for len in 1..l {
                if done.iter().all(|&d| d) {
                    break;
                }
                let tape = Tape::new();
                let p = params.bind(&tape);
                let mem = tape.leaf_rc(Rc::clone(&memories[role.index()]));
                let inputs: Vec<u16> = seqs.iter().flatten().copied().collect();
                let logits = self.decode(&p, role, mem, &inputs, rows, len)?.value();
                for b in 0..rows {
                    let next = if done[b] {
                        PAD
                    } else {
                        argmax(logits.row(b * len + len - 1)) as u16
                    };
                    if next == EOS {
                        done[b] = true;
                    }
                    seqs[b].push(next);
                }
            }
            for s in &mut seqs {
                s.resize(l, PAD);
            }
            out.push(seqs);
        }

        Ok((0..n_songs)
            .map(|s| {
                let mut ids = Vec::with_capacity(c.n_measures * N_TRACKS * l);
                for i in 0..c.n_measures {
                    for seqs in &out {
                        ids.extend_from_slice(&seqs[s * c.n_measures + i]);
                    }
                }
                TokenizedSong {
                    n_measures: c.n_measures,
                    n_tracks: N_TRACKS,
                    seq_len: l,
                    ids,
                }
            })
            .collect())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// MLP `n_z → h → h → 1` with GELU hidden layers; returns logits.
#[derive(Clone, Debug)]
pub struct Discriminator {
    ids: DiscIds,
}

impl Discriminator {
    pub fn new(config: &ModelConfig, seed: u64) -> (Self, ParamStore<f32>) {
        let (ids, store) = layout::build_discriminator(config, seed);
        (Discriminator { ids }, store)
    }

    /// Logits `[S, 1]`; the probability of "posterior" is their sigmoid.
    pub fn logits<'t, T: Element>(&self, p: &Bound<'t, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = lin(p, z, self.ids.l1)?.gelu()?;
        let h = lin(p, h, self.ids.l2)?.gelu()?;
        lin(p, h, self.ids.out)
    }

    pub fn probability(&self, params: &ParamStore<f32>, z: &Tensor<f32>) -> Result<Vec<f32>> {
        let tape = Tape::new();
        let p = params.bind(&tape);
        let zv = tape.leaf(z.clone());
        let prob = self.logits(&p, zv)?.sigmoid()?.value();
        Ok(prob.data().to_vec())
    }
}

const CONFIG_ENTRY: &str = "meta.model_config";

/// Autoencoder and discriminator with their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: AutoEncoder,
    pub ae: ParamStore<f32>,
    pub disc_net: Discriminator,
    pub disc: ParamStore<f32>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let (net, ae) = AutoEncoder::new(config, seed)?;
        let (disc_net, disc) = Discriminator::new(&config, seed ^ 0x9e37_79b9_7f4a_7c15);
        Ok(Model {
            net,
            ae,
            disc_net,
            disc,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    /// Appends the configuration and every parameter to `ckpt`.
    pub fn write_into(&self, ckpt: &mut Checkpoint) {
        ckpt.push_u64(CONFIG_ENTRY, &self.config().to_words());
        for (_, name, t) in self.ae.iter().chain(self.disc.iter()) {
            ckpt.push_f32(name, t);
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        self.write_into(&mut c);
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_words(&ckpt.u64_values(CONFIG_ENTRY)?)?;
        let mut model = Model::new(config, 0)?;
        for store in [&mut model.ae, &mut model.disc] {
            let ids: Vec<_> = store
                .iter()
                .map(|(id, name, _)| (id, name.to_string()))
                .collect();
            for (id, name) in ids {
                let t = ckpt.tensor_f32(&name)?;
                if !store.set(id, t) {
                    return Err(ModelError::Checkpoint(CheckpointError::Invalid {
                        name,
                        detail: "shape does not match the model config".into(),
                    }));
                }
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
