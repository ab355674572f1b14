use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// Purpose tag of a random stream. Each purpose draws from its own ChaCha
/// stream so that consuming one never shifts another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamId {
    Init,
    Batching,
    SimulatorNoise,
    FlowSampling,
    Prior,
    Friction,
    CalibSubset,
    LabelNoise,
    Evaluation,
    Custom(u64),
}

impl StreamId {
    fn code(self) -> u64 {
        match self {
            StreamId::Init => 1,
            StreamId::Batching => 2,
            StreamId::SimulatorNoise => 3,
            StreamId::FlowSampling => 4,
            StreamId::Prior => 5,
            StreamId::Friction => 6,
            StreamId::CalibSubset => 7,
            StreamId::LabelNoise => 8,
            StreamId::Evaluation => 9,
            StreamId::Custom(c) => 0x1000 + c,
        }
    }
}

/// splitmix64 finaliser.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic counter-based random stream keyed by `(seed, stream, path)`.
///
/// Identical keys and call sequences give identical draws. Substreams derived
/// with [`RngStream::substream`] depend only on the key and the index, never on
/// how much of the parent has been consumed.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    path: u64,
    inner: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: StreamId) -> Self {
        Self::keyed(seed, mix64(stream.code()))
    }

    fn keyed(seed: u64, path: u64) -> Self {
        let mut key = [0u8; 32];
        let mut state = seed;
        for chunk in key.chunks_exact_mut(8) {
            state = mix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        let mut inner = ChaCha12Rng::from_seed(key);
        inner.set_stream(path);
        Self { seed, path, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream for item `index` (per-sample, per-epoch, ...).
    pub fn substream(&self, index: u64) -> RngStream {
        Self::keyed(self.seed, mix64(self.path ^ mix64(index.wrapping_add(0x5851_F42D))))
    }

    /// Uniform draw on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// Permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
