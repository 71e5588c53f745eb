use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{Sid, SidSymbol};

/// Token layout: `levels * codebook_size` level-tagged code tokens, then
/// `disambiguators` collision tokens, then BOS, EOS and PAD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub levels: usize,
    pub codebook_size: usize,
    pub disambiguators: usize,
}

impl Vocab {
    pub fn new(levels: usize, codebook_size: usize, disambiguators: usize) -> Self {
        Vocab {
            levels,
            codebook_size,
            disambiguators,
        }
    }

    fn codes(&self) -> usize {
        self.levels * self.codebook_size
    }

    pub fn size(&self) -> usize {
        self.codes() + self.disambiguators + 3
    }

    pub fn bos(&self) -> u32 {
        (self.codes() + self.disambiguators) as u32
    }

    pub fn eos(&self) -> u32 {
        self.bos() + 1
    }

    pub fn pad(&self) -> u32 {
        self.bos() + 2
    }

    pub fn token(&self, sym: SidSymbol) -> Result<u32> {
        match sym {
            SidSymbol::Code { level, code } => {
                let (level, code) = (level as usize, code as usize);
                if level >= self.levels || code >= self.codebook_size {
                    return Err(Error::contract(format!("code ({level}, {code}) outside the vocabulary")));
                }
                Ok((level * self.codebook_size + code) as u32)
            }
            SidSymbol::Disambiguator(d) => {
                if d as usize >= self.disambiguators {
                    return Err(Error::contract(format!(
                        "disambiguator {d} exceeds the vocabulary's {}",
                        self.disambiguators
                    )));
                }
                Ok((self.codes() + d as usize) as u32)
            }
        }
    }

    pub fn symbol(&self, token: u32) -> Option<SidSymbol> {
        let t = token as usize;
        if t < self.codes() {
            Some(SidSymbol::Code {
                level: (t / self.codebook_size) as u16,
                code: (t % self.codebook_size) as u16,
            })
        } else if t < self.codes() + self.disambiguators {
            Some(SidSymbol::Disambiguator((t - self.codes()) as u16))
        } else {
            None
        }
    }

    /// Level of a code token.
    pub fn level_of(&self, token: u32) -> Option<usize> {
        match self.symbol(token)? {
            SidSymbol::Code { level, .. } => Some(level as usize),
            SidSymbol::Disambiguator(_) => None,
        }
    }

    pub fn encode_sid(&self, sid: &Sid) -> Result<Vec<u32>> {
        sid.symbols().into_iter().map(|s| self.token(s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let v = Vocab::new(4, 256, 16);
        assert_eq!(v.size(), 4 * 256 + 16 + 3);
        assert_eq!(v.token(SidSymbol::Code { level: 2, code: 5 }).unwrap(), 517);
        assert_eq!(v.level_of(517), Some(2));
        assert_eq!(v.symbol(1024), Some(SidSymbol::Disambiguator(0)));
        assert_eq!(v.symbol(v.bos()), None);
        assert!(v.token(SidSymbol::Disambiguator(16)).is_err());
    }

    #[test]
    fn round_trip_every_token() {
        let v = Vocab::new(3, 8, 2);
        for t in 0..(v.size() - 3) as u32 {
            assert_eq!(v.token(v.symbol(t).unwrap()).unwrap(), t);
        }
    }
}
