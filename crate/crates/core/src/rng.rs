//! Reproducible random streams.
//!
//! Every sample path owns a stream index `i`. The ChaCha8 key is the
//! splitmix64 expansion of the seed (four successive outputs, little-endian),
//! and the ChaCha stream word is `2 i + s` where `s` selects the sub-stream:
//! `0` for Brownian increments, `1` for the time-randomization draws. The two
//! sub-streams never overlap, so the randomization can be changed without
//! touching the Brownian path.
//!
//! Uniforms are the 53-bit `[0, 1)` doubles of `rand`'s `Standard`
//! distribution. Normals come from the Marsaglia polar method, both variates
//! of each accepted pair being used in order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One step of the splitmix64 generator: returns the next state and output.
pub fn splitmix64(state: u64) -> (u64, u64) {
    let next = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = next;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (next, z ^ (z >> 31))
}

/// Sub-stream selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubStream {
    Brownian = 0,
    Randomization = 1,
}

fn key_from_seed(seed: u64) -> [u8; 32] {
    let mut key = [0u8; 32];
    let mut state = seed;
    for chunk in key.chunks_exact_mut(8) {
        let (next, out) = splitmix64(state);
        state = next;
        chunk.copy_from_slice(&out.to_le_bytes());
    }
    key
}

/// Generator for sub-stream `sub` of stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64, sub: SubStream) -> ChaCha8Rng {
    assert!(stream < 1 << 63, "stream index out of range");
    let mut rng = ChaCha8Rng::from_seed(key_from_seed(seed));
    rng.set_stream(2 * stream + sub as u64);
    rng
}

/// Standard normal variates by the polar method.
#[derive(Debug, Clone)]
pub struct NormalStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(rng: ChaCha8Rng) -> Self {
        NormalStream { rng, spare: None }
    }

    pub fn draw(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.rng.gen::<f64>() - 1.0;
            let v = 2.0 * self.rng.gen::<f64>() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                self.spare = Some(v * f);
                return u * f;
            }
        }
    }
}

/// Uniform `[0, 1)` variates.
#[derive(Debug, Clone)]
pub struct UniformStream {
    rng: ChaCha8Rng,
}

impl UniformStream {
    pub fn new(rng: ChaCha8Rng) -> Self {
        UniformStream { rng }
    }

    pub fn draw(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }
}
