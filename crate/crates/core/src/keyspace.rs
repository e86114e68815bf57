//! Bit-vector keys, Hamming geometry and the negative-key sampling sets used
//! during training.
//!
//! Keys print as `<bits>:<hex>`, most significant bit first, with the hex
//! string left-padded to whole nibbles (`"4:5"` is `0101`). The null key prints
//! as `null`.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Retry budget for rejection sampling.
pub const MAX_SAMPLING_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Key {
    Null,
    Bits(Vec<bool>),
}

impl Key {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Key::Bits(bits)
    }

    /// Parses a string of `0`/`1` characters.
    pub fn from_bit_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(Error::KeyFormat(s.to_string())),
            })
            .collect::<Result<Vec<_>>>()
            .map(Key::Bits)
    }

    pub fn random<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        Key::Bits((0..len).map(|_| rng.gen::<bool>()).collect())
    }

    /// Derives a key from a passphrase by hashing with SHA-256 in counter
    /// mode. Convenience only: there is no key stretching.
    pub fn from_passphrase(passphrase: &str, len: usize) -> Self {
        let mut bits = Vec::with_capacity(len);
        let mut counter: u32 = 0;
        while bits.len() < len {
            let mut hasher = Sha256::new();
            hasher.update(passphrase.as_bytes());
            hasher.update(counter.to_le_bytes());
            let digest = hasher.finalize();
            for byte in digest.iter() {
                for shift in (0..8).rev() {
                    if bits.len() < len {
                        bits.push((byte >> shift) & 1 == 1);
                    }
                }
            }
            counter += 1;
        }
        Key::Bits(bits)
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Key::Null)
    }

    pub fn bits(&self) -> Option<&[bool]> {
        match self {
            Key::Null => None,
            Key::Bits(b) => Some(b),
        }
    }

    pub fn len(&self) -> usize {
        self.bits().map_or(0, <[bool]>::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy with the given bit positions inverted.
    pub fn flipped(&self, positions: &[usize]) -> Result<Key> {
        let mut bits = self.bits().ok_or(Error::NullKey)?.to_vec();
        for &p in positions {
            let n = bits.len();
            let bit = bits.get_mut(p).ok_or_else(|| Error::InvalidParameter(format!("bit {p} out of range for {n}-bit key")))?;
            *bit = !*bit;
        }
        Ok(Key::Bits(bits))
    }

    /// A key at exactly `distance` bit flips, positions chosen uniformly.
    pub fn at_distance<R: Rng + ?Sized>(&self, distance: usize, rng: &mut R) -> Result<Key> {
        let n = self.bits().ok_or(Error::NullKey)?.len();
        if distance > n {
            return Err(Error::InvalidParameter(format!("distance {distance} exceeds key length {n}")));
        }
        let positions = index::sample(rng, n, distance).into_vec();
        self.flipped(&positions)
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Key::Null => f.write_str("null"),
            Key::Bits(bits) => {
                let digits = bits.len().div_ceil(4);
                let pad = digits * 4 - bits.len();
                write!(f, "{}:", bits.len())?;
                let padded = std::iter::repeat_n(false, pad).chain(bits.iter().copied()).collect::<Vec<_>>();
                for nibble in padded.chunks(4) {
                    let v = nibble.iter().fold(0u32, |acc, &b| (acc << 1) | u32::from(b));
                    write!(f, "{}", char::from_digit(v, 16).expect("nibble"))?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for Key {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "null" {
            return Ok(Key::Null);
        }
        let bad = || Error::KeyFormat(s.to_string());
        let (len, hex) = s.split_once(':').ok_or_else(bad)?;
        let len: usize = len.parse().map_err(|_| bad())?;
        if len == 0 || hex.len() != len.div_ceil(4) {
            return Err(bad());
        }
        let mut padded = Vec::with_capacity(hex.len() * 4);
        for c in hex.chars() {
            if c.is_ascii_uppercase() {
                return Err(bad());
            }
            let v = c.to_digit(16).ok_or_else(bad)?;
            padded.extend((0..4).rev().map(|s| (v >> s) & 1 == 1));
        }
        let pad = padded.len() - len;
        if padded[..pad].iter().any(|&b| b) {
            return Err(bad());
        }
        Ok(Key::Bits(padded[pad..].to_vec()))
    }
}

impl TryFrom<String> for Key {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Key> for String {
    fn from(k: Key) -> String {
        k.to_string()
    }
}

pub fn hamming(a: &Key, b: &Key) -> Result<usize> {
    let (a, b) = (a.bits().ok_or(Error::NullKey)?, b.bits().ok_or(Error::NullKey)?);
    if a.len() != b.len() {
        return Err(Error::KeyLength {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count())
}

/// Encoder input for a key: bit 0 maps to -1, bit 1 to +1.
pub fn key_to_features(key: &Key) -> Result<Vec<f64>> {
    let bits = key.bits().ok_or(Error::NullKey)?;
    Ok(bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect())
}

/// Inverse of [`key_to_features`]: positive entries are 1 bits.
pub fn features_to_key(features: &[f64]) -> Key {
    Key::Bits(features.iter().map(|&v| v > 0.0).collect())
}

fn check_user_keys(user_keys: &[Key]) -> Result<usize> {
    let first = user_keys
        .first()
        .ok_or_else(|| Error::InvalidParameter("at least one user key is required".into()))?;
    let len = first.bits().ok_or(Error::NullKey)?.len();
    for k in user_keys {
        let n = k.bits().ok_or(Error::NullKey)?.len();
        if n != len {
            return Err(Error::KeyLength { left: len, right: n });
        }
    }
    Ok(len)
}

/// Neighbour keys: each draw picks a user key, a flip count uniform in
/// `1..=radius` (capped at the key length) and a uniform set of positions.
/// Draws landing on any user key are rejected.
pub fn sample_neighbors<R: Rng + ?Sized>(
    user_keys: &[Key],
    radius: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Key>> {
    if radius < 1 {
        return Err(Error::InvalidParameter("neighbour radius must be at least 1".into()));
    }
    let len = check_user_keys(user_keys)?;
    let excluded: HashSet<&Key> = user_keys.iter().collect();
    let max_flips = radius.min(len);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > MAX_SAMPLING_ATTEMPTS {
                return Err(Error::KeySampling {
                    attempts: MAX_SAMPLING_ATTEMPTS,
                });
            }
            let anchor = &user_keys[rng.gen_range(0..user_keys.len())];
            let flips = rng.gen_range(1..=max_flips);
            let candidate = anchor.at_distance(flips, rng)?;
            if !excluded.contains(&candidate) {
                out.push(candidate);
                break;
            }
        }
    }
    Ok(out)
}

/// `count` uniform keys avoiding `excluded`, followed by the null key.
pub fn sample_random<R: Rng + ?Sized>(excluded: &[Key], count: usize, key_len: usize, rng: &mut R) -> Result<Vec<Key>> {
    if count > 0 && key_len == 0 {
        return Err(Error::InvalidParameter("random keys need a non-zero length".into()));
    }
    let excluded: HashSet<&Key> = excluded.iter().collect();
    let mut out = Vec::with_capacity(count + 1);
    for _ in 0..count {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > MAX_SAMPLING_ATTEMPTS {
                return Err(Error::KeySampling {
                    attempts: MAX_SAMPLING_ATTEMPTS,
                });
            }
            let candidate = Key::random(key_len, rng);
            if !excluded.contains(&candidate) {
                out.push(candidate);
                break;
            }
        }
    }
    out.push(Key::Null);
    Ok(out)
}

/// Keys for one training step: the privileged keys with their objective, the
/// Hamming-neighbourhood negatives and the uniform negatives (null included).
#[derive(Clone, Debug, PartialEq)]
pub struct KeyBatch {
    pub personalized: Vec<(Key, usize)>,
    pub neighbors: Vec<Key>,
    pub random: Vec<Key>,
}

impl KeyBatch {
    /// Draws neighbours first, then random keys avoiding users and neighbours.
    pub fn sample<R: Rng + ?Sized>(
        personalized: &[(Key, usize)],
        radius: usize,
        neighbor_count: usize,
        random_count: usize,
        key_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let user_keys: Vec<Key> = personalized.iter().map(|(k, _)| k.clone()).collect();
        let neighbors = if user_keys.is_empty() || neighbor_count == 0 {
            Vec::new()
        } else {
            sample_neighbors(&user_keys, radius, neighbor_count, rng)?
        };
        let mut excluded = user_keys;
        excluded.extend(neighbors.iter().cloned());
        let random = sample_random(&excluded, random_count, key_len, rng)?;
        Ok(KeyBatch {
            personalized: personalized.to_vec(),
            neighbors,
            random,
        })
    }

    pub fn term_count(&self) -> usize {
        self.personalized.len() + self.neighbors.len() + self.random.len()
    }

    pub fn validate(&self, radius: usize) -> Result<()> {
        let users: HashSet<&Key> = self.personalized.iter().map(|(k, _)| k).collect();
        if users.len() != self.personalized.len() {
            return Err(Error::KeyBatch("duplicate personalized key".into()));
        }
        if users.iter().any(|k| k.is_null()) {
            return Err(Error::KeyBatch("the null key cannot be personalized".into()));
        }
        let nulls = self.random.iter().filter(|k| k.is_null()).count();
        if nulls != 1 {
            return Err(Error::KeyBatch(format!("random set holds {nulls} null keys, expected 1")));
        }
        for k in &self.neighbors {
            if users.contains(k) {
                return Err(Error::KeyBatch(format!("neighbour {k} is a personalized key")));
            }
            let mut close = false;
            for (u, _) in &self.personalized {
                if hamming(k, u)? <= radius {
                    close = true;
                }
            }
            if !close {
                return Err(Error::KeyBatch(format!("neighbour {k} is farther than {radius} from every user")));
            }
        }
        let neighbors: HashSet<&Key> = self.neighbors.iter().collect();
        for k in &self.random {
            if users.contains(k) {
                return Err(Error::KeyBatch(format!("random key {k} is a personalized key")));
            }
            if neighbors.contains(k) {
                return Err(Error::KeyBatch(format!("random key {k} is also a neighbour")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k(s: &str) -> Key {
        Key::from_bit_str(s).unwrap()
    }

    #[test]
    fn hamming_examples() {
        assert_eq!(hamming(&k("0101"), &k("0101")).unwrap(), 0);
        assert_eq!(hamming(&k("0000"), &k("1111")).unwrap(), 4);
        assert!(matches!(hamming(&Key::Null, &k("0")), Err(Error::NullKey)));
        assert!(matches!(hamming(&k("01"), &k("011")), Err(Error::KeyLength { .. })));
    }

    #[test]
    fn hamming_matches_xor_popcount() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.gen_range(1..64);
            let a = Key::random(n, &mut rng);
            let b = Key::random(n, &mut rng);
            let pack = |k: &Key| k.bits().unwrap().iter().fold(0u64, |acc, &x| (acc << 1) | u64::from(x));
            let mut x = pack(&a) ^ pack(&b);
            let mut pop = 0;
            while x != 0 {
                pop += (x & 1) as usize;
                x >>= 1;
            }
            assert_eq!(hamming(&a, &b).unwrap(), pop);
        }
    }

    #[test]
    fn radius_one_neighbours_of_zero_key() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let allowed = [k("1000"), k("0100"), k("0010"), k("0001")];
        let s = sample_neighbors(&[k("0000")], 1, 200, &mut rng).unwrap();
        assert!(s.iter().all(|x| allowed.contains(x)));
        for a in &allowed {
            assert!(s.contains(a), "missing {a}");
        }
    }

    #[test]
    fn radius_two_support_is_the_shell() {
        // All 4-bit keys at distance 1 or 2 from 0000: 4 + 6 = 10 keys.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let user = k("0000");
        let s = sample_neighbors(std::slice::from_ref(&user), 2, 2000, &mut rng).unwrap();
        let support: HashSet<Key> = s.into_iter().collect();
        let mut shell = HashSet::new();
        for v in 0u32..16 {
            let cand = Key::Bits((0..4).rev().map(|i| (v >> i) & 1 == 1).collect());
            let d = hamming(&cand, &user).unwrap();
            if (1..=2).contains(&d) {
                shell.insert(cand);
            }
        }
        assert_eq!(support, shell);
    }

    #[test]
    fn neighbours_exclude_user_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let users = [k("0000"), k("1111")];
        let s = sample_neighbors(&users, 1, 500, &mut rng).unwrap();
        assert!(s.iter().all(|x| !users.contains(x)));
        // 0001 is at distance 1 from 0000 but distance 3 from 1111: both anchors reachable.
        let s = sample_neighbors(&[k("0000"), k("0001")], 1, 500, &mut rng).unwrap();
        assert!(s.iter().all(|x| *x != k("0000") && *x != k("0001")));
    }

    #[test]
    fn neighbour_radius_must_be_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(sample_neighbors(&[k("01")], 0, 1, &mut rng).is_err());
    }

    #[test]
    fn random_set_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sample_random(&[], 0, 32, &mut rng).unwrap(), vec![Key::Null]);
        let s = sample_random(&[], 8, 32, &mut rng).unwrap();
        assert_eq!(s.len(), 9);
        assert_eq!(s.iter().filter(|k| k.is_null()).count(), 1);
    }

    #[test]
    fn random_bits_are_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = sample_random(&[], 10_000, 32, &mut rng).unwrap();
        for bit in 0..32 {
            let ones = s.iter().filter_map(|k| k.bits()).filter(|b| b[bit]).count();
            let freq = ones as f64 / 10_000.0;
            assert!((freq - 0.5).abs() < 0.05, "bit {bit}: {freq}");
        }
    }

    #[test]
    fn random_keys_avoid_exclusions_and_exhaust() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let all: Vec<Key> = vec![k("0"), k("1")];
        assert!(matches!(sample_random(&all, 1, 1, &mut rng), Err(Error::KeySampling { .. })));
        let s = sample_random(&[k("00")], 200, 2, &mut rng).unwrap();
        assert!(!s.contains(&k("00")));
    }

    #[test]
    fn features() {
        assert_eq!(key_to_features(&k("0101")).unwrap(), vec![-1.0, 1.0, -1.0, 1.0]);
        assert_eq!(key_to_features(&k("111")).unwrap(), vec![1.0; 3]);
        assert!(matches!(key_to_features(&Key::Null), Err(Error::NullKey)));
    }

    #[test]
    fn hex_format() {
        assert_eq!(k("0101").to_string(), "4:5");
        assert_eq!(k("11111").to_string(), "5:1f");
        assert_eq!("5:1f".parse::<Key>().unwrap(), k("11111"));
        assert_eq!("null".parse::<Key>().unwrap(), Key::Null);
        assert_eq!(Key::Null.to_string(), "null");
        for bad in ["5:3f", "4:55", "x:1", "4:g", "0:", "4:A"] {
            assert!(bad.parse::<Key>().is_err(), "{bad}");
        }
        let key = Key::from_passphrase("correct horse", 128);
        assert_eq!(key.to_string().len(), "128:".len() + 32);
        assert_eq!(key, Key::from_passphrase("correct horse", 128));
        assert_ne!(key, Key::from_passphrase("correct horsf", 128));
        assert_eq!(Key::from_passphrase("x", 300).len(), 300);
    }

    #[test]
    fn key_batch_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let users = vec![(Key::random(32, &mut rng), 0), (Key::random(32, &mut rng), 1)];
        let batch = KeyBatch::sample(&users, 2, 5, 4, 32, &mut rng).unwrap();
        assert_eq!(batch.term_count(), 2 + 5 + 5);
        batch.validate(2).unwrap();
        let mut broken = batch.clone();
        broken.random.push(users[0].0.clone());
        assert!(broken.validate(2).is_err());
        let mut broken = batch;
        broken.random.push(Key::Null);
        assert!(broken.validate(2).is_err());
    }

    fn key_strategy(len: usize) -> impl Strategy<Value = Key> {
        proptest::collection::vec(any::<bool>(), len).prop_map(Key::Bits)
    }

    proptest! {
        #[test]
        fn hamming_is_a_metric(a in key_strategy(24), b in key_strategy(24), c in key_strategy(24)) {
            let ab = hamming(&a, &b).unwrap();
            prop_assert_eq!(ab, hamming(&b, &a).unwrap());
            prop_assert_eq!(ab == 0, a == b);
            prop_assert!(hamming(&a, &c).unwrap() <= ab + hamming(&b, &c).unwrap());
        }

        #[test]
        fn feature_round_trip(a in key_strategy(40)) {
            let f = key_to_features(&a).unwrap();
            prop_assert_eq!(key_to_features(&features_to_key(&f)).unwrap(), f);
        }

        #[test]
        fn string_round_trip(bits in proptest::collection::vec(any::<bool>(), 1..140)) {
            let key = Key::Bits(bits);
            prop_assert_eq!(key.to_string().parse::<Key>().unwrap(), key);
        }
    }
}
