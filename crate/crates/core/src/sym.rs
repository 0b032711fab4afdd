//! Record ciphering.
//!
//! Layered records use two-stage CBC: the label‖payload body is CBC
//! encrypted with the IV token as initialization vector, then the IV token
//! is masked with the block cipher applied to the first body cipher block.
//! Bodies that are not a whole number of blocks use ciphertext stealing
//! (CBC-CS1), which is plain CBC when the length is block aligned. Every
//! operation preserves the exact byte length of the record.
//!
//! Rebuild records use counter mode with the record's slot index as the
//! counter, so layers applied under a fixed counter commute.

use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockDecrypt, BlockEncrypt, KeyInit};
use aes::{Aes128, Aes256};

use crate::error::{Error, Result};
use crate::group::SymKey;

pub const BLOCK: usize = 16;

/// AES-128 or AES-256 depending on the key length.
#[derive(Clone)]
pub enum BlockCipher {
    Aes128(Box<Aes128>),
    Aes256(Box<Aes256>),
}

impl BlockCipher {
    pub fn new(key: &SymKey) -> Self {
        Self::from_bytes(key.as_bytes())
    }

    /// Panics unless `key` is 16 or 32 bytes; [`SymKey`] guarantees that.
    pub(crate) fn from_bytes(key: &[u8]) -> Self {
        match key.len() {
            16 => BlockCipher::Aes128(Box::new(Aes128::new(GenericArray::from_slice(key)))),
            32 => BlockCipher::Aes256(Box::new(Aes256::new(GenericArray::from_slice(key)))),
            n => panic!("AES key of {n} bytes"),
        }
    }

    pub fn encrypt_block(&self, block: &mut [u8; BLOCK]) {
        let b = GenericArray::from_mut_slice(block);
        match self {
            BlockCipher::Aes128(c) => c.encrypt_block(b),
            BlockCipher::Aes256(c) => c.encrypt_block(b),
        }
    }

    pub fn decrypt_block(&self, block: &mut [u8; BLOCK]) {
        let b = GenericArray::from_mut_slice(block);
        match self {
            BlockCipher::Aes128(c) => c.decrypt_block(b),
            BlockCipher::Aes256(c) => c.decrypt_block(b),
        }
    }
}

fn xor_into(dst: &mut [u8], src: &[u8]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d ^= s;
    }
}

fn block_at(data: &[u8], i: usize) -> [u8; BLOCK] {
    data[i * BLOCK..(i + 1) * BLOCK].try_into().unwrap()
}

/// CBC-CS1 encryption in place. `data` must hold at least one block.
pub fn cbc_cs1_encrypt(cipher: &BlockCipher, iv: &[u8; BLOCK], data: &mut [u8]) -> Result<()> {
    if data.len() < BLOCK {
        return Err(Error::SizeMismatch {
            expected: BLOCK,
            got: data.len(),
        });
    }
    let tail = data.len() % BLOCK;
    let full = data.len() / BLOCK;
    let mut prev = *iv;
    for i in 0..full {
        let mut b = block_at(data, i);
        xor_into(&mut b, &prev);
        cipher.encrypt_block(&mut b);
        data[i * BLOCK..(i + 1) * BLOCK].copy_from_slice(&b);
        prev = b;
    }
    if tail != 0 {
        // prev = C_{n-1}; the final block is the zero-padded partial one.
        let mut last = [0u8; BLOCK];
        last[..tail].copy_from_slice(&data[full * BLOCK..]);
        xor_into(&mut last, &prev);
        cipher.encrypt_block(&mut last);
        let cut = (full - 1) * BLOCK;
        // C_1..C_{n-2} ‖ C_{n-1}[..tail] ‖ C_n
        let mut out = Vec::with_capacity(tail + BLOCK);
        out.extend_from_slice(&prev[..tail]);
        out.extend_from_slice(&last);
        data[cut..].copy_from_slice(&out);
    }
    Ok(())
}

/// Inverse of [`cbc_cs1_encrypt`].
pub fn cbc_cs1_decrypt(cipher: &BlockCipher, iv: &[u8; BLOCK], data: &mut [u8]) -> Result<()> {
    if data.len() < BLOCK {
        return Err(Error::SizeMismatch {
            expected: BLOCK,
            got: data.len(),
        });
    }
    let tail = data.len() % BLOCK;
    let full = data.len() / BLOCK;
    if tail != 0 {
        let cut = (full - 1) * BLOCK;
        let partial = data[cut..cut + tail].to_vec();
        let mut z: [u8; BLOCK] = data[cut + tail..].try_into().unwrap();
        cipher.decrypt_block(&mut z);
        let mut c_prev = [0u8; BLOCK];
        c_prev[..tail].copy_from_slice(&partial);
        c_prev[tail..].copy_from_slice(&z[tail..]);
        let mut p_last = partial;
        xor_into(&mut p_last, &z[..tail]);
        data[cut..cut + BLOCK].copy_from_slice(&c_prev);
        data[cut + BLOCK..].copy_from_slice(&p_last);
    }
    let mut prev = *iv;
    for i in 0..full {
        let c = block_at(data, i);
        let mut b = c;
        cipher.decrypt_block(&mut b);
        xor_into(&mut b, &prev);
        data[i * BLOCK..(i + 1) * BLOCK].copy_from_slice(&b);
        prev = c;
    }
    Ok(())
}

/// Counter mode with a 32-bit big-endian block counter in the last four
/// bytes of `initial`. Encryption and decryption are the same operation.
pub fn ctr_xor(cipher: &BlockCipher, initial: &[u8; BLOCK], data: &mut [u8]) {
    let mut counter = *initial;
    for chunk in data.chunks_mut(BLOCK) {
        let mut ks = counter;
        cipher.encrypt_block(&mut ks);
        xor_into(chunk, &ks);
        let c = u32::from_be_bytes(counter[12..].try_into().unwrap()).wrapping_add(1);
        counter[12..].copy_from_slice(&c.to_be_bytes());
    }
}

/// Number of label bytes for a database of `n` records: `⌈log2(n)/8⌉`,
/// at least one.
pub fn label_len(n: usize) -> usize {
    let bits = if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    } as usize;
    bits.div_ceil(8).max(1)
}

/// Cell geometry of the layered method for a given `n` and payload size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayeredFormat {
    pub label_len: usize,
    pub payload_len: usize,
}

impl LayeredFormat {
    pub fn new(n: usize, payload_len: usize) -> Result<Self> {
        let f = LayeredFormat {
            label_len: label_len(n),
            payload_len,
        };
        if f.body_len() < BLOCK {
            return Err(Error::SizeMismatch {
                expected: BLOCK,
                got: f.body_len(),
            });
        }
        Ok(f)
    }

    pub fn token_len(&self) -> usize {
        self.label_len
    }

    pub fn body_len(&self) -> usize {
        self.label_len + self.payload_len
    }

    pub fn cell_len(&self) -> usize {
        self.token_len() + self.body_len()
    }

    pub fn encode_label(&self, label: usize) -> Vec<u8> {
        let bytes = (label as u64).to_be_bytes();
        bytes[8 - self.label_len..].to_vec()
    }

    /// Plaintext record with a fresh IV token.
    pub fn plaintext(&self, label: usize, payload: &[u8], iv_token: Vec<u8>) -> Result<LayeredRecord> {
        if payload.len() != self.payload_len {
            return Err(Error::SizeMismatch {
                expected: self.payload_len,
                got: payload.len(),
            });
        }
        if iv_token.len() != self.token_len() {
            return Err(Error::SizeMismatch {
                expected: self.token_len(),
                got: iv_token.len(),
            });
        }
        let mut body = self.encode_label(label);
        body.extend_from_slice(payload);
        Ok(LayeredRecord { iv_token, body })
    }

    pub fn split(&self, cell: &[u8]) -> Result<LayeredRecord> {
        if cell.len() != self.cell_len() {
            return Err(Error::SizeMismatch {
                expected: self.cell_len(),
                got: cell.len(),
            });
        }
        let (t, b) = cell.split_at(self.token_len());
        Ok(LayeredRecord {
            iv_token: t.to_vec(),
            body: b.to_vec(),
        })
    }
}

/// IV token plus label‖payload body.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LayeredRecord {
    pub iv_token: Vec<u8>,
    pub body: Vec<u8>,
}

impl LayeredRecord {
    pub fn to_cell(&self) -> Vec<u8> {
        let mut c = self.iv_token.clone();
        c.extend_from_slice(&self.body);
        c
    }

    /// Label of a fully decrypted record.
    pub fn label(&self) -> u64 {
        let n = self.iv_token.len();
        self.body[..n]
            .iter()
            .fold(0u64, |acc, b| (acc << 8) | *b as u64)
    }

    pub fn payload(&self) -> &[u8] {
        &self.body[self.iv_token.len()..]
    }

    fn check(&self) -> Result<()> {
        let t = self.iv_token.len();
        if t == 0 || t > BLOCK {
            return Err(Error::SizeMismatch {
                expected: BLOCK,
                got: t,
            });
        }
        if self.body.len() < BLOCK.max(t) {
            return Err(Error::SizeMismatch {
                expected: BLOCK,
                got: self.body.len(),
            });
        }
        Ok(())
    }

    fn iv(&self) -> [u8; BLOCK] {
        let mut iv = [0u8; BLOCK];
        iv[..self.iv_token.len()].copy_from_slice(&self.iv_token);
        iv
    }
}

fn token_mask(cipher: &BlockCipher, body: &[u8]) -> [u8; BLOCK] {
    let mut b = block_at(body, 0);
    cipher.encrypt_block(&mut b);
    b
}

/// Adds one layer of two-stage CBC encryption.
pub fn layered_wrap(rec: &LayeredRecord, key: &SymKey) -> Result<LayeredRecord> {
    layered_wrap_with(rec, &BlockCipher::new(key))
}

/// Removes one layer added by [`layered_wrap`] under the same key.
pub fn layered_unwrap(rec: &LayeredRecord, key: &SymKey) -> Result<LayeredRecord> {
    layered_unwrap_with(rec, &BlockCipher::new(key))
}

pub fn layered_wrap_with(rec: &LayeredRecord, cipher: &BlockCipher) -> Result<LayeredRecord> {
    rec.check()?;
    let mut body = rec.body.clone();
    cbc_cs1_encrypt(cipher, &rec.iv(), &mut body)?;
    let mask = token_mask(cipher, &body);
    let mut iv_token = rec.iv_token.clone();
    xor_into(&mut iv_token, &mask);
    Ok(LayeredRecord { iv_token, body })
}

pub fn layered_unwrap_with(rec: &LayeredRecord, cipher: &BlockCipher) -> Result<LayeredRecord> {
    rec.check()?;
    let mask = token_mask(cipher, &rec.body);
    let mut iv_token = rec.iv_token.clone();
    xor_into(&mut iv_token, &mask);
    let mut out = LayeredRecord {
        iv_token,
        body: rec.body.clone(),
    };
    let iv = out.iv();
    cbc_cs1_decrypt(cipher, &iv, &mut out.body)?;
    Ok(out)
}

/// Domain separator mixed into every counter block so the same key never
/// produces the same keystream in two different phases or epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PhaseTag {
    Client = 0,
    Ed = 1,
    Wrap = 2,
    Cache = 3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CtrDomain {
    pub epoch: u32,
    pub phase: PhaseTag,
}

impl CtrDomain {
    pub fn new(epoch: u64, phase: PhaseTag) -> Self {
        CtrDomain {
            epoch: u32::try_from(epoch).expect("epoch fits the counter block"),
            phase,
        }
    }

    /// `epoch ‖ phase ‖ counter (56 bits) ‖ block index (32 bits)`.
    pub fn counter_block(&self, counter: u64) -> [u8; BLOCK] {
        let mut b = [0u8; BLOCK];
        b[..4].copy_from_slice(&self.epoch.to_be_bytes());
        b[4] = self.phase as u8;
        b[5..12].copy_from_slice(&counter.to_be_bytes()[1..]);
        b
    }
}

/// Keystream bytes for one record slot.
pub fn keystream(key: &SymKey, domain: CtrDomain, counter: u64, len: usize) -> Vec<u8> {
    let mut out = vec![0u8; len];
    ctr_xor(&BlockCipher::new(key), &domain.counter_block(counter), &mut out);
    out
}

/// XORs one counter-mode layer into `body`. Self-inverse; layers under the
/// same counter commute.
pub fn ctr_layer(
    body: &mut [u8],
    key: &SymKey,
    domain: CtrDomain,
    counter: u64,
    n: usize,
) -> Result<()> {
    ctr_layer_with(body, &BlockCipher::new(key), domain, counter, n)
}

pub fn ctr_layer_with(
    body: &mut [u8],
    cipher: &BlockCipher,
    domain: CtrDomain,
    counter: u64,
    n: usize,
) -> Result<()> {
    if counter >= n as u64 || counter >= 1 << 56 {
        return Err(Error::CounterOutOfRange { counter, n });
    }
    ctr_xor(cipher, &domain.counter_block(counter), body);
    Ok(())
}

/// A rebuild-method cell together with the slot index it currently sits at.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RebuildRecord {
    pub body: Vec<u8>,
    pub index: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::Kappa;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn key(bytes: &[u8]) -> SymKey {
        SymKey::new(bytes.to_vec()).unwrap()
    }

    fn h(s: &str) -> Vec<u8> {
        hex::decode(s).unwrap()
    }

    const SP_KEY: &str = "2b7e151628aed2a6abf7158809cf4f3c";
    const SP_PLAIN: &str = "6bc1bee22e409f96e93d7e117393172aae2d8a571e03ac9c9eb76fac45af8e5130c81c46a35ce411e5fbc1191a0a52eff69f2445df4f9b17ad2b417be66c3710";

    #[test]
    fn cbc_matches_sp800_38a_f21() {
        let c = BlockCipher::new(&key(&h(SP_KEY)));
        let iv: [u8; 16] = h("000102030405060708090a0b0c0d0e0f").try_into().unwrap();
        let mut data = h(SP_PLAIN);
        cbc_cs1_encrypt(&c, &iv, &mut data).unwrap();
        assert_eq!(
            hex::encode(&data),
            "7649abac8119b246cee98e9b12e9197d5086cb9b507219ee95db113a917678b273bed6b8e3c1743b7116e69e222295163ff1caa1681fac09120eca307586e1a7"
        );
        cbc_cs1_decrypt(&c, &iv, &mut data).unwrap();
        assert_eq!(data, h(SP_PLAIN));
    }

    #[test]
    fn ctr_matches_sp800_38a_f51() {
        let c = BlockCipher::new(&key(&h(SP_KEY)));
        let init: [u8; 16] = h("f0f1f2f3f4f5f6f7f8f9fafbfcfdfeff").try_into().unwrap();
        let mut data = h(SP_PLAIN);
        ctr_xor(&c, &init, &mut data);
        assert_eq!(
            hex::encode(&data),
            "874d6191b620e3261bef6864990db6ce9806f66b7970fdff8617187bb9fffdff5ae4df3edbd5d35e5b4f09020db03eab1e031dda2fbe03d1792170a0f3009cee"
        );
    }

    #[test]
    fn cs1_partial_block_prefix_matches_plain_cbc() {
        // The first n-2 blocks and the stolen prefix agree with plain CBC
        // over the zero-padded message.
        let c = BlockCipher::new(&key(&h(SP_KEY)));
        let iv = [7u8; 16];
        let msg: Vec<u8> = (0..37u8).collect();
        let mut cs = msg.clone();
        cbc_cs1_encrypt(&c, &iv, &mut cs).unwrap();
        let mut padded = msg.clone();
        padded.resize(48, 0);
        cbc_cs1_encrypt(&c, &iv, &mut padded).unwrap();
        assert_eq!(cs.len(), 37);
        assert_eq!(cs[..16], padded[..16]);
        assert_eq!(cs[16..21], padded[16..21]);
        assert_eq!(cs[21..], padded[32..]);
    }

    #[test]
    fn label_lengths() {
        assert_eq!(label_len(1), 1);
        assert_eq!(label_len(16), 1);
        assert_eq!(label_len(256), 1);
        assert_eq!(label_len(257), 2);
        assert_eq!(label_len(1 << 16), 2);
        assert_eq!(label_len(1_000_000), 3);
    }

    fn random_record(rng: &mut ChaCha20Rng, n: usize, b: usize) -> LayeredRecord {
        let f = LayeredFormat::new(n, b).unwrap();
        let mut payload = vec![0u8; b];
        rng.fill(&mut payload[..]);
        let mut token = vec![0u8; f.token_len()];
        rng.fill(&mut token[..]);
        f.plaintext(rng.gen_range(0..n), &payload, token).unwrap()
    }

    #[test]
    fn layered_onion_is_lifo() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let rec = random_record(&mut rng, 64, 32);
        let keys: Vec<_> = (0..5).map(|_| SymKey::random(Kappa::K128, &mut rng)).collect();
        let mut x = rec.clone();
        for k in &keys {
            x = layered_wrap(&x, k).unwrap();
            assert_eq!(x.to_cell().len(), rec.to_cell().len());
        }
        for k in keys.iter().rev() {
            x = layered_unwrap(&x, k).unwrap();
        }
        assert_eq!(x, rec);
    }

    #[test]
    fn distinct_tokens_give_distinct_bodies() {
        let f = LayeredFormat::new(16, 32).unwrap();
        let k = key(&[9u8; 16]);
        let a = f.plaintext(3, &[1u8; 32], vec![0]).unwrap();
        let b = f.plaintext(3, &[1u8; 32], vec![1]).unwrap();
        assert_ne!(
            layered_wrap(&a, &k).unwrap().body,
            layered_wrap(&b, &k).unwrap().body
        );
    }

    #[test]
    fn wrong_key_false_accept_rate() {
        // Label of one byte over n = 16: a wrong key yields the right label
        // with probability 2^-8. 10^5 trials, 3 sigma band.
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let f = LayeredFormat::new(16, 32).unwrap();
        let trials = 100_000;
        let mut hits = 0u32;
        for _ in 0..trials {
            let label = rng.gen_range(0..16);
            let rec = f.plaintext(label, &[0u8; 32], vec![rng.gen()]).unwrap();
            let good = SymKey::random(Kappa::K128, &mut rng);
            let bad = SymKey::random(Kappa::K128, &mut rng);
            let wrapped = layered_wrap(&rec, &good).unwrap();
            if layered_unwrap(&wrapped, &bad).unwrap().label() == label as u64 {
                hits += 1;
            }
        }
        let p = 1.0 / 256.0;
        let mean = trials as f64 * p;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        assert!(
            (hits as f64 - mean).abs() <= 3.0 * sigma,
            "hits {hits}, expected {mean} ± {}",
            3.0 * sigma
        );
    }

    #[test]
    fn ctr_involution_and_commutation() {
        let k1 = key(&[1u8; 16]);
        let k2 = key(&[2u8; 32]);
        let d = CtrDomain::new(3, PhaseTag::Ed);
        let x: Vec<u8> = (0..40u8).collect();
        let mut y = x.clone();
        ctr_layer(&mut y, &k1, d, 5, 16).unwrap();
        assert_ne!(y, x);
        ctr_layer(&mut y, &k1, d, 5, 16).unwrap();
        assert_eq!(y, x);

        let mut a = x.clone();
        ctr_layer(&mut a, &k1, d, 5, 16).unwrap();
        ctr_layer(&mut a, &k2, d, 5, 16).unwrap();
        let mut b = x.clone();
        ctr_layer(&mut b, &k2, d, 5, 16).unwrap();
        ctr_layer(&mut b, &k1, d, 5, 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn keystreams_separate_counters_and_phases() {
        let k = key(&[4u8; 16]);
        let d = CtrDomain::new(1, PhaseTag::Wrap);
        assert_ne!(keystream(&k, d, 1, 32), keystream(&k, d, 2, 32));
        assert_ne!(
            keystream(&k, d, 1, 32),
            keystream(&k, CtrDomain::new(1, PhaseTag::Ed), 1, 32)
        );
        assert_ne!(
            keystream(&k, d, 1, 32),
            keystream(&k, CtrDomain::new(2, PhaseTag::Wrap), 1, 32)
        );
    }

    #[test]
    fn counter_out_of_range() {
        let k = key(&[4u8; 16]);
        let mut body = vec![0u8; 32];
        assert!(matches!(
            ctr_layer(&mut body, &k, CtrDomain::new(0, PhaseTag::Ed), 16, 16),
            Err(Error::CounterOutOfRange { counter: 16, n: 16 })
        ));
    }

    #[test]
    fn size_mismatch_rejected() {
        let f = LayeredFormat::new(16, 32).unwrap();
        assert!(f.split(&[0u8; 10]).is_err());
        assert!(f.plaintext(0, &[0u8; 31], vec![0]).is_err());
        assert!(LayeredFormat::new(16, 8).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn prop_layered_lifo(seed in any::<u64>(), b in 16usize..80, n in 2usize..5000) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let rec = random_record(&mut rng, n, b);
            let k1 = SymKey::random(Kappa::K128, &mut rng);
            let k2 = SymKey::random(Kappa::K256, &mut rng);
            let w = layered_wrap(&layered_wrap(&rec, &k1).unwrap(), &k2).unwrap();
            prop_assert_eq!(w.to_cell().len(), rec.to_cell().len());
            let u = layered_unwrap(&layered_unwrap(&w, &k2).unwrap(), &k1).unwrap();
            prop_assert_eq!(u, rec);
        }

        #[test]
        fn prop_ctr_commutes(seed in any::<u64>(), len in 1usize..100, counter in 0u64..1024, epoch in 0u64..100) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let k1 = SymKey::random(Kappa::K128, &mut rng);
            let k2 = SymKey::random(Kappa::K128, &mut rng);
            let d = CtrDomain::new(epoch, PhaseTag::Ed);
            let x: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let mut a = x.clone();
            ctr_layer(&mut a, &k1, d, counter, 1024).unwrap();
            ctr_layer(&mut a, &k2, d, counter, 1024).unwrap();
            let mut b = x.clone();
            ctr_layer(&mut b, &k2, d, counter, 1024).unwrap();
            ctr_layer(&mut b, &k1, d, counter, 1024).unwrap();
            prop_assert_eq!(&a, &b);
            ctr_layer(&mut a, &k1, d, counter, 1024).unwrap();
            ctr_layer(&mut a, &k2, d, counter, 1024).unwrap();
            prop_assert_eq!(a, x);
        }
    }
}
