//! Leveled HE over exact slot vectors.
//!
//! Levels run from `L-1` (fresh) down to 0. Multiplications consume a level,
//! additions take the minimum, rotations keep it, re-encryption resets it.

mod ciphertext;
mod evaluator;
mod keys;
mod params;
mod simulator;
pub mod wire;

pub use ciphertext::{Ciphertext, KeyId, Plaintext};
pub use evaluator::{Evaluator, ROOT_SCOPE};
pub use keys::{keygen, keygen_seeded, KeyContext, PublicKey};
pub use params::LheParams;
pub use simulator::{cmul, he_add, he_mul, rot, LheBackend, Simulator};
