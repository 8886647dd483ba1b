//! Recovery phrases for long-term private keys.
//!
//! The 256 key bits are split into 24 eleven-bit indices into a 2048-word
//! English list (the final 8 bits of the 24th word are zero padding), followed
//! by one checksum word taken from the first 11 bits of SHA-512 of the key.

use std::fmt;
use std::sync::OnceLock;

use thiserror::Error;

use crate::crypto::sha512;
use crate::keys::PrivateKey;

const WORDLIST_SRC: &str = include_str!("english.txt");

pub const DATA_WORDS: usize = 24;
pub const PHRASE_WORDS: usize = DATA_WORDS + 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MnemonicError {
    #[error("phrase must have {PHRASE_WORDS} words, got {0}")]
    WordCount(usize),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("checksum word does not match")]
    Checksum,
    #[error("non-zero padding bits")]
    Padding,
}

pub fn wordlist() -> &'static [&'static str] {
    static WORDS: OnceLock<Vec<&'static str>> = OnceLock::new();
    WORDS.get_or_init(|| {
        let words: Vec<&str> = WORDLIST_SRC.lines().filter(|l| !l.is_empty()).collect();
        assert_eq!(words.len(), 2048, "wordlist must hold 2048 words");
        words
    })
}

fn word_index(word: &str) -> Result<usize, MnemonicError> {
    // The list is sorted, so binary search works.
    wordlist().binary_search(&word).map_err(|_| MnemonicError::UnknownWord(word.to_string()))
}

#[derive(Clone, PartialEq, Eq)]
pub struct RecoveryPhrase(Vec<&'static str>);

impl RecoveryPhrase {
    pub fn words(&self) -> &[&'static str] {
        &self.0
    }

    pub fn parse(s: &str) -> Result<Self, MnemonicError> {
        let words: Vec<&str> = s.split_whitespace().collect();
        if words.len() != PHRASE_WORDS {
            return Err(MnemonicError::WordCount(words.len()));
        }
        let list = wordlist();
        let resolved =
            words.iter().map(|w| word_index(&w.to_lowercase()).map(|i| list[i])).collect::<Result<Vec<_>, _>>()?;
        Ok(RecoveryPhrase(resolved))
    }
}

impl fmt::Display for RecoveryPhrase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

impl fmt::Debug for RecoveryPhrase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("RecoveryPhrase(..)")
    }
}

fn checksum_index(key: &[u8; 32]) -> usize {
    let d = sha512(key);
    (u16::from_be_bytes([d[0], d[1]]) >> 5) as usize
}

pub fn encode(key: &PrivateKey) -> RecoveryPhrase {
    let list = wordlist();
    let mut words = Vec::with_capacity(PHRASE_WORDS);
    let mut acc: u32 = 0;
    let mut bits = 0;
    for &b in key.0.iter() {
        acc = (acc << 8) | b as u32;
        bits += 8;
        if bits >= 11 {
            bits -= 11;
            words.push(list[((acc >> bits) & 0x7ff) as usize]);
        }
    }
    // 256 = 23 * 11 + 3: the last word holds 3 key bits and 8 zero bits.
    words.push(list[((acc << (11 - bits)) & 0x7ff) as usize]);
    debug_assert_eq!(words.len(), DATA_WORDS);
    words.push(list[checksum_index(&key.0)]);
    RecoveryPhrase(words)
}

pub fn decode(phrase: &RecoveryPhrase) -> Result<PrivateKey, MnemonicError> {
    if phrase.0.len() != PHRASE_WORDS {
        return Err(MnemonicError::WordCount(phrase.0.len()));
    }
    let mut key = [0u8; 32];
    let mut out = 0;
    let mut acc: u32 = 0;
    let mut bits = 0;
    for (i, word) in phrase.0[..DATA_WORDS].iter().enumerate() {
        let idx = word_index(word)? as u32;
        if i == DATA_WORDS - 1 {
            if idx & 0xff != 0 {
                return Err(MnemonicError::Padding);
            }
            acc = (acc << 3) | (idx >> 8);
            bits += 3;
        } else {
            acc = (acc << 11) | idx;
            bits += 11;
        }
        while bits >= 8 {
            bits -= 8;
            key[out] = (acc >> bits) as u8;
            out += 1;
        }
    }
    debug_assert_eq!(out, 32);
    if word_index(phrase.0[DATA_WORDS])? != checksum_index(&key) {
        return Err(MnemonicError::Checksum);
    }
    Ok(PrivateKey(key))
}
