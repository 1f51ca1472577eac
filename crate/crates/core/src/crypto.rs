//! Digests and signatures.
//!
//! Signing goes through the [`SignatureScheme`] trait. The default binding,
//! [`MacScheme`], is a keyed deterministic MAC: every principal's key is
//! derived from a deployment secret, which keeps simulations fast and
//! reproducible while preserving the verify/forge distinction the protocol
//! relies on (scripted adversaries never use other principals' keys).

use std::fmt;

use sha2::{Digest as _, Sha256};

/// A 256-bit SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn of(data: &[u8]) -> Digest {
        let out: [u8; 32] = Sha256::digest(data).into();
        Digest(out)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// First eight bytes as a little-endian integer. Used as a compact
    /// payload fingerprint in traces.
    pub fn short(&self) -> u64 {
        let mut b = [0u8; 8];
        b.copy_from_slice(&self.0[..8]);
        u64::from_le_bytes(b)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0[..6] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "…")
    }
}

/// Incremental hasher with domain separation helpers.
pub struct Hasher(Sha256);

impl Hasher {
    pub fn new(domain: &[u8]) -> Self {
        let mut h = Sha256::new();
        h.update((domain.len() as u32).to_le_bytes());
        h.update(domain);
        Hasher(h)
    }

    pub fn bytes(&mut self, data: &[u8]) -> &mut Self {
        self.0.update((data.len() as u64).to_le_bytes());
        self.0.update(data);
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.update(v.to_le_bytes());
        self
    }

    pub fn digest(&mut self, d: &Digest) -> &mut Self {
        self.0.update(d.0);
        self
    }

    pub fn finish(self) -> Digest {
        let out: [u8; 32] = self.0.finalize().into();
        Digest(out)
    }
}

/// A signature produced by a [`SignatureScheme`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Signature(pub [u8; 32]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sig:{:?}", Digest(self.0))
    }
}

/// Who signs a message.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Principal {
    Node(usize),
    Client(u64),
}

pub trait SignatureScheme {
    fn sign(&self, signer: Principal, msg: &[u8]) -> Signature;
    fn verify(&self, signer: Principal, msg: &[u8], sig: &Signature) -> bool;
}

/// Keyed MAC binding of [`SignatureScheme`].
#[derive(Clone, Debug)]
pub struct MacScheme {
    secret: u64,
}

impl MacScheme {
    pub fn new(secret: u64) -> Self {
        MacScheme { secret }
    }

    fn key(&self, who: Principal) -> Digest {
        let mut h = Hasher::new(b"mac-key");
        h.u64(self.secret);
        match who {
            Principal::Node(n) => h.u64(0).u64(n as u64),
            Principal::Client(c) => h.u64(1).u64(c),
        };
        h.finish()
    }
}

impl Default for MacScheme {
    fn default() -> Self {
        MacScheme::new(0x155_5eed)
    }
}

impl SignatureScheme for MacScheme {
    fn sign(&self, signer: Principal, msg: &[u8]) -> Signature {
        let key = self.key(signer);
        let mut h = Hasher::new(b"mac");
        h.digest(&key).bytes(msg);
        Signature(h.finish().0)
    }

    fn verify(&self, signer: Principal, msg: &[u8], sig: &Signature) -> bool {
        self.sign(signer, msg) == *sig
    }
}
