//! Abstract crypto provider and the deterministic toy construction used by
//! default.
//!
//! The toy provider is not meant to resist cryptanalysis. It exists so that
//! the failure semantics the attacks depend on hold exactly: decryption
//! under a foreign key fails, key agreement is symmetric, and signatures do
//! not verify under a different public key or over a different message.
//!
//! * hash: SHA-256
//! * key agreement: Diffie-Hellman in the multiplicative group modulo the
//!   Mersenne prime 2^61 - 1
//! * signatures: Schnorr over the same group
//! * AEAD: SHA-256 counter-mode keystream with a 16-byte SHA-256 tag

use std::fmt;

use rand::RngCore;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub type Digest = [u8; 32];

pub const AEAD_NONCE_LEN: usize = 12;
pub const AEAD_TAG_LEN: usize = 16;
pub const PUBLIC_KEY_LEN: usize = 8;
pub const SIGNATURE_LEN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("authenticated decryption failed")]
    DecryptFailed,
    #[error("ciphertext shorter than tag")]
    Truncated,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey(pub u64);

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct SecretKey(u64);

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Keypair {
    pub public: PublicKey,
    secret: SecretKey,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Signature {
    commitment: u64,
    response: u64,
}

impl Keypair {
    pub fn secret(&self) -> &SecretKey {
        &self.secret
    }
}

impl fmt::Debug for Keypair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Keypair").field("public", &self.public).finish_non_exhaustive()
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pk:{:016x}", self.0)
    }
}

impl fmt::Display for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl PublicKey {
    pub fn to_bytes(self) -> [u8; PUBLIC_KEY_LEN] {
        self.0.to_be_bytes()
    }

    pub fn from_bytes(b: [u8; PUBLIC_KEY_LEN]) -> Self {
        PublicKey(u64::from_be_bytes(b))
    }
}

impl Signature {
    pub fn to_bytes(self) -> [u8; SIGNATURE_LEN] {
        let mut out = [0u8; SIGNATURE_LEN];
        out[..8].copy_from_slice(&self.commitment.to_be_bytes());
        out[8..].copy_from_slice(&self.response.to_be_bytes());
        out
    }

    pub fn from_bytes(b: [u8; SIGNATURE_LEN]) -> Self {
        let mut c = [0u8; 8];
        let mut r = [0u8; 8];
        c.copy_from_slice(&b[..8]);
        r.copy_from_slice(&b[8..]);
        Signature { commitment: u64::from_be_bytes(c), response: u64::from_be_bytes(r) }
    }
}

/// Operations every enclave, client and ledger validator relies on.
pub trait CryptoProvider: Send + Sync + fmt::Debug {
    fn hash(&self, data: &[u8]) -> Digest;
    fn kdf(&self, salt: &[u8], ikm: &[u8], info: &[u8]) -> [u8; 32];
    fn keypair_from_seed(&self, seed: &[u8; 32]) -> Keypair;
    fn agree(&self, secret: &SecretKey, peer: &PublicKey) -> [u8; 32];
    fn aead_encrypt(&self, key: &[u8; 32], nonce: &[u8; AEAD_NONCE_LEN], aad: &[u8], plaintext: &[u8]) -> Vec<u8>;
    fn aead_decrypt(
        &self,
        key: &[u8; 32],
        nonce: &[u8; AEAD_NONCE_LEN],
        aad: &[u8],
        ciphertext: &[u8],
    ) -> Result<Vec<u8>, CryptoError>;
    fn sign(&self, keypair: &Keypair, message: &[u8]) -> Signature;
    fn verify(&self, public: &PublicKey, message: &[u8], signature: &Signature) -> bool;
    /// Uniform draw in `[0, 2^64)`.
    fn uniform(&self, rng: &mut dyn RngCore) -> u64;
}

/// Multiplicative group modulo 2^61 - 1 with primitive root 37.
const MODULUS: u64 = (1 << 61) - 1;
const GROUP_ORDER: u64 = MODULUS - 1;
const GENERATOR: u64 = 37;

fn mul_mod(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

fn pow_mod(mut base: u64, mut exp: u64) -> u64 {
    let mut acc = 1u64;
    base %= MODULUS;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, MODULUS);
        }
        base = mul_mod(base, base, MODULUS);
        exp >>= 1;
    }
    acc
}

fn sha256_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_be_bytes());
        h.update(p);
    }
    h.finalize().into()
}

fn digest_to_u64(d: &Digest) -> u64 {
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    u64::from_be_bytes(b)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ToyCrypto;

impl ToyCrypto {
    fn challenge(commitment: u64, public: &PublicKey, message: &[u8]) -> u64 {
        let d = sha256_parts(&[b"schnorr-challenge", &commitment.to_be_bytes(), &public.to_bytes(), message]);
        digest_to_u64(&d) % GROUP_ORDER
    }

    fn keystream_xor(key: &[u8; 32], nonce: &[u8; AEAD_NONCE_LEN], data: &mut [u8]) {
        for (block_idx, chunk) in data.chunks_mut(32).enumerate() {
            let ks = sha256_parts(&[b"aead-stream", key, nonce, &(block_idx as u64).to_be_bytes()]);
            for (b, k) in chunk.iter_mut().zip(ks.iter()) {
                *b ^= k;
            }
        }
    }

    fn tag(key: &[u8; 32], nonce: &[u8; AEAD_NONCE_LEN], aad: &[u8], ciphertext: &[u8]) -> [u8; AEAD_TAG_LEN] {
        let full = sha256_parts(&[b"aead-tag", key, nonce, aad, ciphertext]);
        let mut tag = [0u8; AEAD_TAG_LEN];
        tag.copy_from_slice(&full[..AEAD_TAG_LEN]);
        tag
    }
}

impl CryptoProvider for ToyCrypto {
    fn hash(&self, data: &[u8]) -> Digest {
        Sha256::digest(data).into()
    }

    fn kdf(&self, salt: &[u8], ikm: &[u8], info: &[u8]) -> [u8; 32] {
        let prk = sha256_parts(&[b"kdf-extract", salt, ikm]);
        sha256_parts(&[b"kdf-expand", &prk, info])
    }

    fn keypair_from_seed(&self, seed: &[u8; 32]) -> Keypair {
        let d = sha256_parts(&[b"keygen", seed]);
        // exponent in [1, order - 1]
        let secret = digest_to_u64(&d) % (GROUP_ORDER - 1) + 1;
        Keypair { public: PublicKey(pow_mod(GENERATOR, secret)), secret: SecretKey(secret) }
    }

    fn agree(&self, secret: &SecretKey, peer: &PublicKey) -> [u8; 32] {
        let shared = pow_mod(peer.0, secret.0);
        sha256_parts(&[b"agree", &shared.to_be_bytes()])
    }

    fn aead_encrypt(&self, key: &[u8; 32], nonce: &[u8; AEAD_NONCE_LEN], aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
        let mut out = plaintext.to_vec();
        Self::keystream_xor(key, nonce, &mut out);
        let tag = Self::tag(key, nonce, aad, &out);
        out.extend_from_slice(&tag);
        out
    }

    fn aead_decrypt(
        &self,
        key: &[u8; 32],
        nonce: &[u8; AEAD_NONCE_LEN],
        aad: &[u8],
        ciphertext: &[u8],
    ) -> Result<Vec<u8>, CryptoError> {
        if ciphertext.len() < AEAD_TAG_LEN {
            return Err(CryptoError::Truncated);
        }
        let (body, tag) = ciphertext.split_at(ciphertext.len() - AEAD_TAG_LEN);
        if Self::tag(key, nonce, aad, body) != tag {
            return Err(CryptoError::DecryptFailed);
        }
        let mut out = body.to_vec();
        Self::keystream_xor(key, nonce, &mut out);
        Ok(out)
    }

    fn sign(&self, keypair: &Keypair, message: &[u8]) -> Signature {
        let k_seed = sha256_parts(&[b"schnorr-nonce", &keypair.secret.0.to_be_bytes(), message]);
        let k = digest_to_u64(&k_seed) % (GROUP_ORDER - 1) + 1;
        let commitment = pow_mod(GENERATOR, k);
        let e = Self::challenge(commitment, &keypair.public, message);
        let response = ((k as u128 + e as u128 * keypair.secret.0 as u128) % GROUP_ORDER as u128) as u64;
        Signature { commitment, response }
    }

    fn verify(&self, public: &PublicKey, message: &[u8], signature: &Signature) -> bool {
        if public.0 == 0 || public.0 >= MODULUS || signature.commitment == 0 || signature.commitment >= MODULUS {
            return false;
        }
        let e = Self::challenge(signature.commitment, public, message);
        let lhs = pow_mod(GENERATOR, signature.response);
        let rhs = mul_mod(signature.commitment, pow_mod(public.0, e), MODULUS);
        lhs == rhs
    }

    fn uniform(&self, rng: &mut dyn RngCore) -> u64 {
        rng.next_u64()
    }
}

/// Maps a raw 64-bit draw onto `[0, 1)`.
pub fn unit_interval(raw: u64) -> f64 {
    (raw >> 11) as f64 / (1u64 << 53) as f64
}
