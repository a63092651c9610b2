//! Exact capture and restore of [`Rng`](crate::Rng) state.

use crate::{Error, Result, Rng};

/// Snapshot of a ChaCha generator: seed, stream and word position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        use rand::SeedableRng;
        let mut rng = Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    /// Hex encoding used in checkpoint metadata.
    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(64 + 1 + 16 + 1 + 32);
        for b in self.seed {
            s.push_str(&format!("{b:02x}"));
        }
        s.push_str(&format!(":{:016x}:{:032x}", self.stream, self.word_pos));
        s
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bad = || Error::Integrity(format!("malformed rng state {s:?}"));
        let mut parts = s.split(':');
        let (seed_hex, stream_hex, pos_hex) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) if parts.next().is_none() => (a, b, c),
            _ => return Err(bad()),
        };
        if seed_hex.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        Ok(RngState {
            seed,
            stream: u64::from_str_radix(stream_hex, 16).map_err(|_| bad())?,
            word_pos: u128::from_str_radix(pos_hex, 16).map_err(|_| bad())?,
        })
    }
}
