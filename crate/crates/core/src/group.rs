//! Prime-order group arithmetic, Diffie-Hellman agreement, key/seed
//! derivation and the per-round blinding chains.
//!
//! The protocol runs over Ristretto255. [`ToyGroup`] is the multiplicative
//! group modulo 23 and only exists so arithmetic can be checked by hand; it
//! has no security properties.

use std::fmt::Debug;

use curve25519_dalek::constants::RISTRETTO_BASEPOINT_POINT;
use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar as DalekScalar;
use curve25519_dalek::traits::Identity;
use hkdf::Hkdf;
use rand::RngCore;
use sha2::{Digest, Sha256, Sha512};

use crate::error::{Error, Result};

const DERIVE_INFO: &[u8] = b"mixoram/v1 key+seed";
const BLIND_DST: &[u8] = b"mixoram/v1 blinding";

/// Security parameter: length of symmetric keys and permutation seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kappa {
    K128,
    K256,
}

impl Kappa {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            128 => Ok(Kappa::K128),
            256 => Ok(Kappa::K256),
            other => Err(Error::UnsupportedKappa(other)),
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            Kappa::K128 => 128,
            Kappa::K256 => 256,
        }
    }

    pub fn bytes(self) -> usize {
        self.bits() as usize / 8
    }
}

/// Symmetric encryption key of exactly κ bits.
#[derive(Clone, PartialEq, Eq)]
pub struct SymKey(Vec<u8>);

/// Permutation seed of exactly κ bits.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct PermSeed(Vec<u8>);

macro_rules! secret_bytes {
    ($t:ident) => {
        impl $t {
            pub fn new(bytes: Vec<u8>) -> Result<Self> {
                Kappa::from_bits(bytes.len() as u32 * 8)?;
                Ok($t(bytes))
            }

            pub fn random<R: RngCore + ?Sized>(kappa: Kappa, rng: &mut R) -> Self {
                let mut bytes = vec![0u8; kappa.bytes()];
                rng.fill_bytes(&mut bytes);
                $t(bytes)
            }

            pub fn as_bytes(&self) -> &[u8] {
                &self.0
            }

            pub fn kappa(&self) -> Kappa {
                Kappa::from_bits(self.0.len() as u32 * 8).expect("length checked at construction")
            }
        }

        impl Debug for $t {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                write!(f, concat!(stringify!($t), "({}..)"), hex_prefix(&self.0))
            }
        }
    };
}

secret_bytes!(SymKey);
secret_bytes!(PermSeed);

fn hex_prefix(bytes: &[u8]) -> String {
    bytes.iter().take(4).map(|b| format!("{b:02x}")).collect()
}

/// Output of [`derive`]: an encryption key and a permutation seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DerivedSecrets {
    pub enc_key: SymKey,
    pub perm_seed: PermSeed,
}

/// A cyclic group with a fixed generator, used multiplicatively.
pub trait Group: Clone + Debug + Send + Sync + 'static {
    type Scalar: Copy + Eq + Debug + Send + Sync;
    type Element: Copy + Eq + Debug + Send + Sync;

    fn generator() -> Self::Element;
    fn identity() -> Self::Element;
    /// `base^e`.
    fn exp(base: &Self::Element, e: &Self::Scalar) -> Self::Element;
    fn scalar_mul(a: &Self::Scalar, b: &Self::Scalar) -> Self::Scalar;
    fn scalar_one() -> Self::Scalar;
    fn scalar_is_zero(s: &Self::Scalar) -> bool;
    /// Uniform nonzero scalar.
    fn random_scalar<R: RngCore + ?Sized>(rng: &mut R) -> Self::Scalar;
    /// Hash of the canonical encodings, reduced into the nonzero scalars.
    fn hash_to_scalar(parts: &[&Self::Element]) -> Self::Scalar;
    fn encode(e: &Self::Element) -> Vec<u8>;
    fn decode(bytes: &[u8]) -> Result<Self::Element>;
    fn encode_scalar(s: &Self::Scalar) -> Vec<u8>;
    fn decode_scalar(bytes: &[u8]) -> Result<Self::Scalar>;

    fn base_exp(e: &Self::Scalar) -> Self::Element {
        Self::exp(&Self::generator(), e)
    }
}

/// Ristretto255: prime order, canonical 32-byte encodings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ristretto255;

impl Group for Ristretto255 {
    type Scalar = DalekScalar;
    type Element = RistrettoPoint;

    fn generator() -> RistrettoPoint {
        RISTRETTO_BASEPOINT_POINT
    }

    fn identity() -> RistrettoPoint {
        RistrettoPoint::identity()
    }

    fn exp(base: &RistrettoPoint, e: &DalekScalar) -> RistrettoPoint {
        base * e
    }

    fn scalar_mul(a: &DalekScalar, b: &DalekScalar) -> DalekScalar {
        a * b
    }

    fn scalar_one() -> DalekScalar {
        DalekScalar::ONE
    }

    fn scalar_is_zero(s: &DalekScalar) -> bool {
        *s == DalekScalar::ZERO
    }

    fn random_scalar<R: RngCore + ?Sized>(rng: &mut R) -> DalekScalar {
        loop {
            let mut wide = [0u8; 64];
            rng.fill_bytes(&mut wide);
            let s = DalekScalar::from_bytes_mod_order_wide(&wide);
            if s != DalekScalar::ZERO {
                return s;
            }
        }
    }

    fn hash_to_scalar(parts: &[&RistrettoPoint]) -> DalekScalar {
        let mut ctr = 0u32;
        loop {
            let mut h = Sha512::new();
            h.update(BLIND_DST);
            h.update(ctr.to_be_bytes());
            for p in parts {
                h.update(p.compress().as_bytes());
            }
            let s = DalekScalar::from_bytes_mod_order_wide(&h.finalize().into());
            if s != DalekScalar::ZERO {
                return s;
            }
            ctr += 1;
        }
    }

    fn encode(e: &RistrettoPoint) -> Vec<u8> {
        e.compress().to_bytes().to_vec()
    }

    fn decode(bytes: &[u8]) -> Result<RistrettoPoint> {
        let c = CompressedRistretto::from_slice(bytes).map_err(|_| Error::InvalidEncoding)?;
        c.decompress().ok_or(Error::InvalidEncoding)
    }

    fn encode_scalar(s: &DalekScalar) -> Vec<u8> {
        s.to_bytes().to_vec()
    }

    fn decode_scalar(bytes: &[u8]) -> Result<DalekScalar> {
        let arr: [u8; 32] = bytes.try_into().map_err(|_| Error::InvalidEncoding)?;
        Option::from(DalekScalar::from_canonical_bytes(arr)).ok_or(Error::InvalidEncoding)
    }
}

/// The multiplicative group modulo 23 with generator 5 (order 22).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyGroup;

impl ToyGroup {
    pub const MODULUS: u64 = 23;
    pub const ORDER: u64 = 22;
}

impl Group for ToyGroup {
    type Scalar = u64;
    type Element = u64;

    fn generator() -> u64 {
        5
    }

    fn identity() -> u64 {
        1
    }

    fn exp(base: &u64, e: &u64) -> u64 {
        let (mut acc, mut b, mut e) = (1u64, *base % Self::MODULUS, *e);
        while e > 0 {
            if e & 1 == 1 {
                acc = acc * b % Self::MODULUS;
            }
            b = b * b % Self::MODULUS;
            e >>= 1;
        }
        acc
    }

    fn scalar_mul(a: &u64, b: &u64) -> u64 {
        a * b % Self::ORDER
    }

    fn scalar_one() -> u64 {
        1
    }

    fn scalar_is_zero(s: &u64) -> bool {
        (*s).is_multiple_of(Self::ORDER)
    }

    fn random_scalar<R: RngCore + ?Sized>(rng: &mut R) -> u64 {
        1 + rng.next_u64() % (Self::ORDER - 1)
    }

    fn hash_to_scalar(parts: &[&u64]) -> u64 {
        let mut ctr = 0u32;
        loop {
            let mut h = Sha256::new();
            h.update(BLIND_DST);
            h.update(ctr.to_be_bytes());
            for p in parts {
                h.update([**p as u8]);
            }
            let d = h.finalize();
            let v = u64::from_be_bytes(d[..8].try_into().unwrap()) % Self::ORDER;
            if v != 0 {
                return v;
            }
            ctr += 1;
        }
    }

    fn encode(e: &u64) -> Vec<u8> {
        vec![*e as u8]
    }

    fn decode(bytes: &[u8]) -> Result<u64> {
        match bytes {
            [b] if (1..Self::MODULUS).contains(&(*b as u64)) => Ok(*b as u64),
            _ => Err(Error::InvalidEncoding),
        }
    }

    fn encode_scalar(s: &u64) -> Vec<u8> {
        vec![*s as u8]
    }

    fn decode_scalar(bytes: &[u8]) -> Result<u64> {
        match bytes {
            [b] if (*b as u64) < Self::ORDER => Ok(*b as u64),
            _ => Err(Error::InvalidEncoding),
        }
    }
}

/// Fresh key pair `(x, g^x)`.
pub fn keygen<G: Group, R: RngCore + ?Sized>(rng: &mut R) -> (G::Scalar, G::Element) {
    let x = G::random_scalar(rng);
    (x, G::base_exp(&x))
}

/// Diffie-Hellman shared secret `other_public^own_private`.
pub fn agree<G: Group>(own_private: &G::Scalar, other_public: &G::Element) -> Result<G::Element> {
    if *other_public == G::identity() {
        return Err(Error::IdentityElement);
    }
    Ok(G::exp(other_public, own_private))
}

/// HKDF-SHA256 (RFC 5869) extract-then-expand.
pub fn hkdf_sha256(salt: Option<&[u8]>, ikm: &[u8], info: &[u8], len: usize) -> Vec<u8> {
    let hk = Hkdf::<Sha256>::new(salt, ikm);
    let mut okm = vec![0u8; len];
    hk.expand(info, &mut okm)
        .expect("output length bounded by 255 * 32");
    okm
}

/// Expands a shared secret into `2κ` bits: the encryption key comes first,
/// the permutation seed last.
pub fn derive<G: Group>(ss: &G::Element, kappa: Kappa) -> DerivedSecrets {
    let okm = hkdf_sha256(None, &G::encode(ss), DERIVE_INFO, 2 * kappa.bytes());
    let (k, s) = okm.split_at(kappa.bytes());
    DerivedSecrets {
        enc_key: SymKey(k.to_vec()),
        perm_seed: PermSeed(s.to_vec()),
    }
}

/// `h_b(alpha, ss)`.
pub fn alpha_blinding_factor<G: Group>(alpha: &G::Element, ss: &G::Element) -> G::Scalar {
    G::hash_to_scalar(&[alpha, ss])
}

/// `h_b(sk)`, or `h_b(context, sk)` when a context element is bound in.
pub fn beta_blinding_factor<G: Group>(sk: &G::Element, context: Option<&G::Element>) -> G::Scalar {
    match context {
        Some(c) => G::hash_to_scalar(&[c, sk]),
        None => G::hash_to_scalar(&[sk]),
    }
}

/// Mix-side refresh of a private element: both `alpha` and the shared
/// secret are raised to `h_b(alpha, ss)`.
pub fn blind_alpha<G: Group>(
    prev_alpha: &G::Element,
    prev_ss: &G::Element,
) -> (G::Element, G::Element) {
    let b = alpha_blinding_factor::<G>(prev_alpha, prev_ss);
    (G::exp(prev_alpha, &b), G::exp(prev_ss, &b))
}

/// Refresh of the public-allocation element. Every mix computes the same
/// `next_sk` because `h_b` only depends on the shared `prev_sk`.
pub fn blind_beta<G: Group>(
    prev_beta: &G::Element,
    prev_sk: &G::Element,
    context: Option<&G::Element>,
) -> (G::Element, G::Element) {
    let b = beta_blinding_factor::<G>(prev_sk, context);
    (G::exp(prev_beta, &b), G::exp(prev_sk, &b))
}

/// Client-side view of one mix's private chain, tracked through the
/// exponent `z * prod(b)` instead of the mix's private key.
#[derive(Clone, Debug)]
pub struct AlphaChain<G: Group> {
    exponent: G::Scalar,
    mix_public: G::Element,
}

impl<G: Group> AlphaChain<G> {
    pub fn new(z: G::Scalar, mix_public: G::Element) -> Self {
        AlphaChain {
            exponent: z,
            mix_public,
        }
    }

    /// `(alpha_j, ss_j)` at the current position.
    pub fn current(&self) -> (G::Element, G::Element) {
        (
            G::base_exp(&self.exponent),
            G::exp(&self.mix_public, &self.exponent),
        )
    }

    pub fn exponent(&self) -> G::Scalar {
        self.exponent
    }

    pub fn advance(&mut self) {
        let (alpha, ss) = self.current();
        let b = alpha_blinding_factor::<G>(&alpha, &ss);
        self.exponent = G::scalar_mul(&self.exponent, &b);
    }
}

/// Per-round secrets for `len` chain positions, computed by the mix from
/// `alpha_0` and its private key.
pub fn mix_alpha_schedule<G: Group>(
    alpha0: &G::Element,
    private: &G::Scalar,
    len: usize,
    kappa: Kappa,
) -> Result<Vec<DerivedSecrets>> {
    let mut alpha = *alpha0;
    let mut ss = agree::<G>(private, alpha0)?;
    let mut out = Vec::with_capacity(len);
    for j in 0..len {
        out.push(derive::<G>(&ss, kappa));
        if j + 1 < len {
            (alpha, ss) = blind_alpha::<G>(&alpha, &ss);
        }
    }
    Ok(out)
}

/// The same schedule reconstructed by the client from `z` and the mix
/// public key.
pub fn client_alpha_schedule<G: Group>(
    z: &G::Scalar,
    mix_public: &G::Element,
    len: usize,
    kappa: Kappa,
) -> Vec<DerivedSecrets> {
    let mut chain = AlphaChain::<G>::new(*z, *mix_public);
    let mut out = Vec::with_capacity(len);
    for j in 0..len {
        out.push(derive::<G>(&chain.current().1, kappa));
        if j + 1 < len {
            chain.advance();
        }
    }
    out
}

/// Public permutation seeds for `len` chain positions as seen by one mix
/// holding `beta_0` and its own share `m_i`.
pub fn mix_public_schedule<G: Group>(
    beta0: &G::Element,
    own_share: &G::Scalar,
    len: usize,
    kappa: Kappa,
    context: Option<&G::Element>,
) -> Result<Vec<PermSeed>> {
    if *beta0 == G::identity() {
        return Err(Error::IdentityElement);
    }
    let mut beta = *beta0;
    let mut sk = G::exp(beta0, own_share);
    let mut out = Vec::with_capacity(len);
    for j in 0..len {
        out.push(derive::<G>(&sk, kappa).perm_seed);
        if j + 1 < len {
            (beta, sk) = blind_beta::<G>(&beta, &sk, context);
        }
    }
    Ok(out)
}

/// Public seeds reconstructed by the client from the product of all shares.
pub fn client_public_schedule<G: Group>(
    share_product: &G::Scalar,
    len: usize,
    kappa: Kappa,
    context: Option<&G::Element>,
) -> Vec<PermSeed> {
    let mut sk = G::base_exp(share_product);
    let mut out = Vec::with_capacity(len);
    for j in 0..len {
        out.push(derive::<G>(&sk, kappa).perm_seed);
        if j + 1 < len {
            let b = beta_blinding_factor::<G>(&sk, context);
            sk = G::exp(&sk, &b);
        }
    }
    out
}

/// Writes a mix key pair as two lines of hex: private scalar, public point.
pub fn write_key_file(path: &std::path::Path, private: &DalekScalar, public: &RistrettoPoint) -> Result<()> {
    let hex = |b: Vec<u8>| b.iter().map(|x| format!("{x:02x}")).collect::<String>();
    let text = format!(
        "{}\n{}\n",
        hex(Ristretto255::encode_scalar(private)),
        hex(Ristretto255::encode(public))
    );
    std::fs::write(path, text)?;
    Ok(())
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    let s = s.trim();
    if !s.len().is_multiple_of(2) || !s.is_ascii() {
        return Err(Error::InvalidEncoding);
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| Error::InvalidEncoding))
        .collect()
}

/// Reads a key file written by [`write_key_file`]; the public half must
/// match the private one.
pub fn read_key_file(path: &std::path::Path) -> Result<(DalekScalar, RistrettoPoint)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let private = Ristretto255::decode_scalar(&unhex(lines.next().unwrap_or_default())?)?;
    let public = Ristretto255::decode(&unhex(lines.next().unwrap_or_default())?)?;
    if Ristretto255::base_exp(&private) != public {
        return Err(Error::InvalidEncoding);
    }
    Ok((private, public))
}

/// Reads the public half of a key file.
pub fn read_public_key(path: &std::path::Path) -> Result<RistrettoPoint> {
    let text = std::fs::read_to_string(path)?;
    let line = text.lines().nth(1).ok_or(Error::InvalidEncoding)?;
    Ristretto255::decode(&unhex(line)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    // Independent square-and-multiply-free oracle: repeated multiplication.
    fn naive_pow(base: u64, e: u64) -> u64 {
        (0..e).fold(1, |acc, _| acc * base % 23)
    }

    #[test]
    fn toy_keygen_and_agreement_match_hand_values() {
        assert_eq!(ToyGroup::base_exp(&6), 8);
        assert_eq!(naive_pow(5, 6), 8);
        let y = ToyGroup::base_exp(&6);
        let alpha = ToyGroup::base_exp(&3);
        assert_eq!(alpha, 10);
        assert_eq!(agree::<ToyGroup>(&3, &y).unwrap(), 6);
        assert_eq!(agree::<ToyGroup>(&6, &alpha).unwrap(), 6);
        assert_eq!(naive_pow(8, 3), 6);
    }

    #[test]
    fn exponent_one_is_identity_map() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert_eq!(
            Ristretto255::base_exp(&Ristretto255::scalar_one()),
            Ristretto255::generator()
        );
        let (_, p) = keygen::<Ristretto255, _>(&mut rng);
        assert_eq!(agree::<Ristretto255>(&Ristretto255::scalar_one(), &p).unwrap(), p);
        assert_eq!(agree::<ToyGroup>(&1, &17).unwrap(), 17);
    }

    #[test]
    fn toy_symmetry_over_random_pairs() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..100 {
            let a = ToyGroup::random_scalar(&mut rng);
            let b = ToyGroup::random_scalar(&mut rng);
            let lhs = agree::<ToyGroup>(&a, &ToyGroup::base_exp(&b)).unwrap();
            let rhs = agree::<ToyGroup>(&b, &ToyGroup::base_exp(&a)).unwrap();
            assert_eq!(lhs, rhs);
            assert_eq!(lhs, naive_pow(5, a * b));
        }
    }

    #[test]
    fn ristretto_symmetry() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (a, ya) = keygen::<Ristretto255, _>(&mut rng);
            let (b, yb) = keygen::<Ristretto255, _>(&mut rng);
            assert_eq!(
                agree::<Ristretto255>(&a, &yb).unwrap(),
                agree::<Ristretto255>(&b, &ya).unwrap()
            );
        }
    }

    #[test]
    fn distinct_rng_streams_give_distinct_keys() {
        let (a, _) = keygen::<Ristretto255, _>(&mut ChaCha20Rng::seed_from_u64(10));
        let (b, _) = keygen::<Ristretto255, _>(&mut ChaCha20Rng::seed_from_u64(11));
        assert_ne!(a, b);
    }

    #[test]
    fn identity_rejected() {
        assert!(matches!(
            agree::<Ristretto255>(&Ristretto255::scalar_one(), &Ristretto255::identity()),
            Err(Error::IdentityElement)
        ));
        assert!(matches!(agree::<ToyGroup>(&3, &1), Err(Error::IdentityElement)));
    }

    #[test]
    fn rfc5869_case_1() {
        let ikm = [0x0bu8; 22];
        let salt = hex::decode("000102030405060708090a0b0c").unwrap();
        let info = hex::decode("f0f1f2f3f4f5f6f7f8f9").unwrap();
        let okm = hkdf_sha256(Some(&salt), &ikm, &info, 42);
        assert_eq!(
            hex::encode(okm),
            "3cb25f25faacd57a90434f64d0362f2a2d2d0a90cf1a5a4c5db02d56ecc4c5bf34007208d5b887185865"
        );
    }

    #[test]
    fn derive_is_deterministic_and_kappa_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let (_, p) = keygen::<Ristretto255, _>(&mut rng);
        for kappa in [Kappa::K128, Kappa::K256] {
            let a = derive::<Ristretto255>(&p, kappa);
            let b = derive::<Ristretto255>(&p, kappa);
            assert_eq!(a, b);
            assert_eq!(a.enc_key.as_bytes().len() * 8, kappa.bits() as usize);
            assert_eq!(a.perm_seed.as_bytes().len() * 8, kappa.bits() as usize);
            assert_ne!(a.enc_key.as_bytes(), a.perm_seed.as_bytes());
        }
        assert!(matches!(Kappa::from_bits(192), Err(Error::UnsupportedKappa(192))));
    }

    #[test]
    fn derive_splits_key_then_seed() {
        let p = Ristretto255::generator();
        let okm = hkdf_sha256(None, &Ristretto255::encode(&p), DERIVE_INFO, 32);
        let d = derive::<Ristretto255>(&p, Kappa::K128);
        assert_eq!(d.enc_key.as_bytes(), &okm[..16]);
        assert_eq!(d.perm_seed.as_bytes(), &okm[16..]);
    }

    #[test]
    fn bit_flip_in_encoded_secret_changes_both_outputs() {
        let g = Ristretto255::generator();
        let enc = Ristretto255::encode(&g);
        let base = hkdf_sha256(None, &enc, DERIVE_INFO, 32);
        let mut flipped = enc.clone();
        flipped[5] ^= 0x10;
        let other = hkdf_sha256(None, &flipped, DERIVE_INFO, 32);
        assert_ne!(base[..16], other[..16]);
        assert_ne!(base[16..], other[16..]);
    }

    #[test]
    fn alpha_chain_client_and_mix_agree_toy() {
        let x = 6u64;
        let y = ToyGroup::base_exp(&x);
        let z = 3u64;
        let mut chain = AlphaChain::<ToyGroup>::new(z, y);
        let mut alpha = ToyGroup::base_exp(&z);
        let mut ss = agree::<ToyGroup>(&x, &alpha).unwrap();
        for _ in 0..5 {
            assert_eq!(chain.current(), (alpha, ss));
            // mix route: ss recomputed from alpha and the private key
            assert_eq!(ToyGroup::exp(&alpha, &x), ss);
            (alpha, ss) = blind_alpha::<ToyGroup>(&alpha, &ss);
            chain.advance();
        }
    }

    #[test]
    fn alpha_schedules_agree_up_to_64_rounds() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (x, y) = keygen::<Ristretto255, _>(&mut rng);
        let z = Ristretto255::random_scalar(&mut rng);
        let alpha0 = Ristretto255::base_exp(&z);
        let mix = mix_alpha_schedule::<Ristretto255>(&alpha0, &x, 64, Kappa::K128).unwrap();
        let client = client_alpha_schedule::<Ristretto255>(&z, &y, 64, Kappa::K128);
        assert_eq!(mix, client);
        let mut keys: Vec<_> = mix.iter().map(|d| d.enc_key.as_bytes().to_vec()).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 64);
    }

    #[test]
    fn unit_blinding_keeps_alpha() {
        let alpha = ToyGroup::base_exp(&7);
        assert_eq!(ToyGroup::exp(&alpha, &ToyGroup::scalar_one()), alpha);
    }

    #[test]
    fn public_seeds_reach_consensus() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let m = 3;
        let shares: Vec<_> = (0..m).map(|_| Ristretto255::random_scalar(&mut rng)).collect();
        let product = shares
            .iter()
            .fold(Ristretto255::scalar_one(), |acc, s| Ristretto255::scalar_mul(&acc, s));
        let client = client_public_schedule::<Ristretto255>(&product, 4, Kappa::K128, None);
        for i in 0..m {
            let others = shares
                .iter()
                .enumerate()
                .filter(|(l, _)| *l != i)
                .fold(Ristretto255::scalar_one(), |acc, (_, s)| {
                    Ristretto255::scalar_mul(&acc, s)
                });
            let beta0 = Ristretto255::base_exp(&others);
            let seeds =
                mix_public_schedule::<Ristretto255>(&beta0, &shares[i], 4, Kappa::K128, None)
                    .unwrap();
            assert_eq!(seeds, client);
        }
    }

    #[test]
    fn single_mix_public_chain_is_consistent() {
        let share = 9u64;
        let beta0 = ToyGroup::generator();
        let mix = mix_public_schedule::<ToyGroup>(&beta0, &share, 4, Kappa::K128, None).unwrap();
        let client = client_public_schedule::<ToyGroup>(&share, 4, Kappa::K128, None);
        assert_eq!(mix, client);
    }

    #[test]
    fn tampered_share_diverges() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let a = Ristretto255::random_scalar(&mut rng);
        let b = Ristretto255::random_scalar(&mut rng);
        let beta_for_a = Ristretto255::base_exp(&b);
        let honest = mix_public_schedule::<Ristretto255>(&beta_for_a, &a, 3, Kappa::K128, None)
            .unwrap();
        let tampered_sk = Ristretto255::exp(&Ristretto255::base_exp(&b), &b);
        let (_, next) = blind_beta::<Ristretto255>(&beta_for_a, &tampered_sk, None);
        assert_ne!(
            derive::<Ristretto255>(&tampered_sk, Kappa::K128).perm_seed,
            honest[0]
        );
        assert_ne!(derive::<Ristretto255>(&next, Kappa::K128).perm_seed, honest[1]);
    }

    #[test]
    fn wrong_private_key_gives_wrong_secret_toy() {
        // alpha = 10 generates Z_23^*, so only x itself reproduces the secret.
        let (x, z) = (6u64, 3u64);
        let alpha = ToyGroup::base_exp(&z);
        let right = agree::<ToyGroup>(&x, &alpha).unwrap();
        for wrong in 1..22u64 {
            let got = agree::<ToyGroup>(&wrong, &alpha).unwrap();
            assert_eq!(got == right, wrong == x, "x' = {wrong}");
        }
    }

    #[test]
    fn encoding_roundtrip_and_rejects_garbage() {
        let g = Ristretto255::generator();
        assert_eq!(Ristretto255::decode(&Ristretto255::encode(&g)).unwrap(), g);
        assert!(Ristretto255::decode(&[0xffu8; 32]).is_err());
        assert!(Ristretto255::decode(&[1u8; 5]).is_err());
        assert!(ToyGroup::decode(&[0]).is_err());
        assert!(ToyGroup::decode(&[23]).is_err());
    }
}
