//! Bracketed list encoding used for every structured value in the store.
//!
//! A value is a list of tagged atoms: `S(..)` for strings and `I(..)` for
//! integers written as raw digit strings (hex app ids and decimal TTLs share
//! the tag). Lists with several atoms are joined with `"; "`, a single atom
//! is followed by a bare `;`:
//!
//! ```text
//! [S(replicate); S(TARGET)]
//! [S(success);]
//! ```
//!
//! Inside `S(..)` the characters `\ ( ) ; [ ]` are backslash-escaped so that
//! arbitrary strings round-trip.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Atom {
    Str(String),
    /// Raw digits, hex or decimal; the tag does not carry the radix.
    Int(String),
}

impl Atom {
    pub fn str(s: impl Into<String>) -> Self {
        Atom::Str(s.into())
    }

    pub fn int(digits: impl Into<String>) -> Result<Self, CodecError> {
        let digits = digits.into();
        if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(CodecError::BadInt(digits));
        }
        Ok(Atom::Int(digits))
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Atom::Str(s) => Some(s),
            Atom::Int(_) => None,
        }
    }

    pub fn as_int(&self) -> Option<&str> {
        match self {
            Atom::Int(s) => Some(s),
            Atom::Str(_) => None,
        }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::Str(s) => {
                f.write_str("S(")?;
                for c in s.chars() {
                    if matches!(c, '\\' | '(' | ')' | ';' | '[' | ']') {
                        f.write_str("\\")?;
                    }
                    write!(f, "{c}")?;
                }
                f.write_str(")")
            }
            Atom::Int(d) => write!(f, "I({d})"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("value is not a bracketed list: {0:?}")]
    NotAList(String),
    #[error("unexpected input at byte {at}: {rest:?}")]
    Unexpected { at: usize, rest: String },
    #[error("integer atom must be hex or decimal digits, got {0:?}")]
    BadInt(String),
    #[error("unterminated atom")]
    Unterminated,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct ValueList(pub Vec<Atom>);

impl ValueList {
    pub fn new(atoms: Vec<Atom>) -> Self {
        ValueList(atoms)
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for ValueList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        match self.0.as_slice() {
            [] => {}
            [only] => write!(f, "{only};")?,
            atoms => {
                for (i, a) in atoms.iter().enumerate() {
                    if i > 0 {
                        f.write_str("; ")?;
                    }
                    write!(f, "{a}")?;
                }
            }
        }
        f.write_str("]")
    }
}

impl FromStr for ValueList {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let inner = s
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(|| CodecError::NotAList(s.to_string()))?;
        let bytes: Vec<char> = inner.chars().collect();
        let mut atoms = Vec::new();
        let mut i = 0;
        let unexpected = |i: usize| CodecError::Unexpected {
            at: i,
            rest: bytes[i..].iter().collect(),
        };
        while i < bytes.len() {
            while i < bytes.len() && bytes[i] == ' ' {
                i += 1;
            }
            if i >= bytes.len() {
                break;
            }
            let tag = bytes[i];
            if i + 1 >= bytes.len() || bytes[i + 1] != '(' {
                return Err(unexpected(i));
            }
            i += 2;
            let mut body = String::new();
            let mut closed = false;
            while i < bytes.len() {
                match bytes[i] {
                    '\\' if tag == 'S' => {
                        i += 1;
                        if i >= bytes.len() {
                            return Err(CodecError::Unterminated);
                        }
                        body.push(bytes[i]);
                    }
                    ')' => {
                        closed = true;
                        i += 1;
                        break;
                    }
                    c => body.push(c),
                }
                i += 1;
            }
            if !closed {
                return Err(CodecError::Unterminated);
            }
            atoms.push(match tag {
                'S' => Atom::Str(body),
                'I' => Atom::int(body)?,
                _ => return Err(unexpected(i)),
            });
            while i < bytes.len() && bytes[i] == ' ' {
                i += 1;
            }
            if i < bytes.len() {
                if bytes[i] != ';' {
                    return Err(unexpected(i));
                }
                i += 1;
            }
        }
        Ok(ValueList(atoms))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_atom_has_trailing_separator() {
        let v = ValueList::new(vec![Atom::str("success")]);
        assert_eq!(v.to_string(), "[S(success);]");
        assert_eq!("[S(success);]".parse::<ValueList>().unwrap(), v);
    }

    #[test]
    fn remote_replicate_literal() {
        let s = "[S(replicate); S(TARGET); I(0a000013); I(300); S(shutdown); S(IMAGE.xen)]";
        let v: ValueList = s.parse().unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.atoms()[2].as_int(), Some("0a000013"));
        assert_eq!(v.to_string(), s);
    }

    #[test]
    fn rejects_garbage() {
        assert!("S(x)".parse::<ValueList>().is_err());
        assert!("[X(1)]".parse::<ValueList>().is_err());
        assert!("[I(zz)]".parse::<ValueList>().is_err());
        assert!("[S(abc]".parse::<ValueList>().is_err());
    }

    fn atom() -> impl Strategy<Value = Atom> {
        prop_oneof![
            ".*".prop_map(Atom::Str),
            "[0-9a-f]{1,8}".prop_map(Atom::Int),
        ]
    }

    proptest! {
        #[test]
        fn encoding_round_trips(atoms in proptest::collection::vec(atom(), 0..6)) {
            let v = ValueList::new(atoms);
            let back: ValueList = v.to_string().parse().unwrap();
            prop_assert_eq!(back, v);
        }
    }
}
