//! Hashing, signing and signer recovery.
//!
//! The default scheme is simulation-grade. Digests are SHA-256 over the
//! canonical encoding. A signature is `address ‖ public key ‖ tag` where the
//! tag is a hash keyed by the public key, so recovery reads the address and
//! checks that the embedded key derives it and that the tag binds the digest.
//! It is deterministic and unique per (key, digest), which is all the protocol
//! relies on. Nothing in the harness forges signatures; Byzantine strategies
//! only ever sign with keys they own.

pub mod codec;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use codec::{Decode, DecodeError, Encode, Reader, Writer};

pub const DIGEST_LEN: usize = 32;
pub const ADDRESS_LEN: usize = 20;
const PUBLIC_KEY_LEN: usize = 32;
const TAG_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = ADDRESS_LEN + PUBLIC_KEY_LEN + TAG_LEN;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("signature has length {0}, expected {SIGNATURE_LEN}")]
    MalformedSignature(usize),
    #[error("signature does not verify")]
    BadSignature,
    #[error("key seeds {first} and {second} produce the same address {address}")]
    DuplicateAddress {
        first: u64,
        second: u64,
        address: Address,
    },
}

fn tagged_hash(domain: &[u8], parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((domain.len() as u32).to_be_bytes());
    h.update(domain);
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// 32-byte hash of a canonical encoding.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub const ZERO: Digest = Digest([0; DIGEST_LEN]);

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Hash of an arbitrary payload, normally the canonical encoding of a protocol value.
pub fn hash_digest(payload: &[u8]) -> Digest {
    Digest(Sha256::digest(payload).into())
}

/// Hash of any value with a canonical encoding.
pub fn digest_of<T: Encode + ?Sized>(value: &T) -> Digest {
    let mut w = Writer::default();
    value.encode_to(&mut w);
    hash_digest(&w.into_bytes())
}

/// Validator / node identifier. Ordered lexicographically.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Address(pub [u8; ADDRESS_LEN]);

impl Address {
    pub const ZERO: Address = Address([0; ADDRESS_LEN]);

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn short(&self) -> String {
        self.to_hex()[..8].to_string()
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{}", self.short())
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{}", self.to_hex())
    }
}

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Signature(pub Vec<u8>);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = hex::encode(&self.0);
        write!(f, "Signature({}..)", &h[..h.len().min(12)])
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey([u8; 32]);

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

impl SecretKey {
    fn public_key(&self) -> [u8; PUBLIC_KEY_LEN] {
        tagged_hash(b"ibft-sim/pk", &[&self.0])
    }
}

fn address_of_public_key(pk: &[u8]) -> Address {
    let h = tagged_hash(b"ibft-sim/addr", &[pk]);
    let mut a = [0u8; ADDRESS_LEN];
    a.copy_from_slice(&h[DIGEST_LEN - ADDRESS_LEN..]);
    Address(a)
}

pub fn address_of(sk: &SecretKey) -> Address {
    address_of_public_key(&sk.public_key())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Keypair {
    pub secret: SecretKey,
    pub address: Address,
}

impl Keypair {
    pub fn sign(&self, digest: &Digest) -> Signature {
        sign(digest, &self.secret)
    }
}

/// Deterministic key generation from a seed.
pub fn key_gen(seed: u64) -> Keypair {
    let secret = SecretKey(tagged_hash(b"ibft-sim/sk", &[&seed.to_be_bytes()]));
    let address = address_of(&secret);
    Keypair { secret, address }
}

/// Generates one keypair per seed, rejecting any two seeds that collide on an address.
pub fn key_gen_all(seeds: &[u64]) -> Result<Vec<Keypair>, CryptoError> {
    let mut seen: HashMap<Address, u64> = HashMap::new();
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let kp = key_gen(seed);
        if let Some(&first) = seen.get(&kp.address) {
            return Err(CryptoError::DuplicateAddress {
                first,
                second: seed,
                address: kp.address,
            });
        }
        seen.insert(kp.address, seed);
        out.push(kp);
    }
    Ok(out)
}

pub fn sign(digest: &Digest, sk: &SecretKey) -> Signature {
    let pk = sk.public_key();
    let address = address_of_public_key(&pk);
    let tag = tagged_hash(b"ibft-sim/sig", &[&pk, &digest.0]);
    let mut bytes = Vec::with_capacity(SIGNATURE_LEN);
    bytes.extend_from_slice(&address.0);
    bytes.extend_from_slice(&pk);
    bytes.extend_from_slice(&tag);
    Signature(bytes)
}

/// Recovers the signer of `digest`. Fails on malformed bytes or a signature
/// that was produced over a different digest.
pub fn recover_address(digest: &Digest, sig: &Signature) -> Result<Address, CryptoError> {
    let bytes = &sig.0;
    if bytes.len() != SIGNATURE_LEN {
        return Err(CryptoError::MalformedSignature(bytes.len()));
    }
    let (addr, rest) = bytes.split_at(ADDRESS_LEN);
    let (pk, tag) = rest.split_at(PUBLIC_KEY_LEN);
    let claimed = Address(addr.try_into().expect("split at ADDRESS_LEN"));
    if address_of_public_key(pk) != claimed {
        return Err(CryptoError::BadSignature);
    }
    if tagged_hash(b"ibft-sim/sig", &[pk, &digest.0]).as_slice() != tag {
        return Err(CryptoError::BadSignature);
    }
    Ok(claimed)
}

impl Encode for Digest {
    fn encode_to(&self, w: &mut Writer) {
        w.raw(&self.0);
    }
}

impl Decode for Digest {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Digest(r.array()?))
    }
}

impl Encode for Address {
    fn encode_to(&self, w: &mut Writer) {
        w.raw(&self.0);
    }
}

impl Decode for Address {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Address(r.array()?))
    }
}

impl Encode for Signature {
    fn encode_to(&self, w: &mut Writer) {
        w.bytes(&self.0);
    }
}

impl Decode for Signature {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Signature(r.bytes()?))
    }
}

fn parse_hex<const N: usize>(s: &str) -> Result<[u8; N], String> {
    let s = s.strip_prefix("0x").unwrap_or(s);
    let v = hex::decode(s).map_err(|e| e.to_string())?;
    v.try_into()
        .map_err(|v: Vec<u8>| format!("expected {N} bytes, got {}", v.len()))
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_hex(&s).map(Digest).map_err(serde::de::Error::custom)
    }
}

impl Serialize for Address {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("0x{}", self.to_hex()))
    }
}

impl<'de> Deserialize<'de> for Address {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_hex(&s).map(Address).map_err(serde::de::Error::custom)
    }
}

/// Records every hashed payload so a run can assert that no two distinct
/// payloads ever shared a digest.
#[derive(Debug, Default)]
pub struct DigestRegistry {
    seen: HashMap<Digest, Vec<u8>>,
    collisions: usize,
}

impl DigestRegistry {
    pub fn register(&mut self, payload: &[u8]) -> Digest {
        let d = hash_digest(payload);
        match self.seen.get(&d) {
            Some(prev) if prev.as_slice() != payload => self.collisions += 1,
            Some(_) => {}
            None => {
                self.seen.insert(d, payload.to_vec());
            }
        }
        d
    }

    pub fn distinct_payloads(&self) -> usize {
        self.seen.len()
    }

    pub fn collisions(&self) -> usize {
        self.collisions
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn key_gen_is_deterministic_and_consistent() {
        assert_eq!(key_gen(1), key_gen(1));
        assert_ne!(key_gen(1).address, key_gen(2).address);
        let kp = key_gen(7);
        assert_eq!(address_of(&kp.secret), kp.address);
    }

    #[test]
    fn key_gen_all_rejects_duplicate_seeds() {
        let err = key_gen_all(&[1, 2, 1]).unwrap_err();
        assert!(matches!(err, CryptoError::DuplicateAddress { first: 1, second: 1, .. }));
        assert_eq!(key_gen_all(&[1, 2, 3]).unwrap().len(), 3);
    }

    #[test]
    fn empty_payload_hashes() {
        let d = hash_digest(&[]);
        assert_eq!(d, hash_digest(&[]));
        assert_ne!(d, Digest::ZERO);
    }

    #[test]
    fn sign_recover_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let kp = key_gen(rng.random());
            let d = Digest(rng.random());
            assert_eq!(recover_address(&d, &kp.sign(&d)).unwrap(), kp.address);
        }
    }

    #[test]
    fn signatures_are_unique() {
        let d1 = hash_digest(b"one");
        let d2 = hash_digest(b"two");
        let (a, b) = (key_gen(1), key_gen(2));
        assert_ne!(a.sign(&d1), b.sign(&d1));
        assert_ne!(a.sign(&d1), a.sign(&d2));
    }

    #[test]
    fn mismatched_digests_never_recover_the_signer() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut false_matches = 0;
        for i in 0..10_000u64 {
            let kp = key_gen(i);
            let d = Digest(rng.random());
            let other = Digest(rng.random());
            let sig = kp.sign(&d);
            if recover_address(&other, &sig) == Ok(kp.address) {
                false_matches += 1;
            }
        }
        assert_eq!(false_matches, 0);
    }

    #[test]
    fn garbage_signatures_fail() {
        let d = hash_digest(b"x");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let short: Vec<u8> = (0..10).map(|_| rng.random()).collect();
        assert_eq!(
            recover_address(&d, &Signature(short)),
            Err(CryptoError::MalformedSignature(10))
        );
        let full: Vec<u8> = (0..SIGNATURE_LEN).map(|_| rng.random()).collect();
        assert_eq!(
            recover_address(&d, &Signature(full)),
            Err(CryptoError::BadSignature)
        );
    }

    #[test]
    fn fuzzed_payloads_do_not_collide() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut payloads = HashSet::new();
        let mut digests = HashSet::new();
        for _ in 0..100_000 {
            let len = rng.random_range(0..48);
            let p: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            if payloads.insert(p.clone()) {
                digests.insert(hash_digest(&p));
            }
        }
        assert_eq!(payloads.len(), digests.len());
    }

    #[test]
    fn registry_counts_distinct_payloads() {
        let mut reg = DigestRegistry::default();
        reg.register(b"a");
        reg.register(b"a");
        reg.register(b"b");
        assert_eq!(reg.distinct_payloads(), 2);
        assert_eq!(reg.collisions(), 0);
    }

    #[test]
    fn hex_serde_round_trip() {
        let a = key_gen(3).address;
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<Address>(&s).unwrap(), a);
    }
}
