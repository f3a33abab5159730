use std::collections::BTreeMap;

use log::warn;
use thiserror::Error;

use super::{ring_bonds, Atom, Bond, BondOrder, Element, MolecularGraph};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SmilesErrorKind {
    #[error("empty SMILES string")]
    Empty,
    #[error("unexpected character {0:?}")]
    UnexpectedChar(char),
    #[error("expected an atom")]
    ExpectedAtom,
    #[error("unsupported element {0:?}")]
    UnsupportedElement(String),
    #[error("unclosed bracket atom")]
    UnclosedBracket,
    #[error("unbalanced parenthesis")]
    UnbalancedParen,
    #[error("empty branch")]
    EmptyBranch,
    #[error("ring closure {0} was never closed")]
    UnclosedRing(u32),
    #[error("ring closure {0} bonds an atom to itself")]
    RingSelfLoop(u32),
    #[error("ring closure {0} has conflicting bond symbols")]
    RingBondMismatch(u32),
    #[error("duplicate bond between atoms {0} and {1}")]
    DuplicateBond(usize, usize),
    #[error("aromatic bond between non-aromatic atoms")]
    AromaticBondOnAliphatic,
    #[error("hydrogen count {0} exceeds 9")]
    TooManyHydrogens(u32),
    #[error("disconnected molecules ('.') are not supported")]
    Disconnected,
    #[error("dangling bond symbol")]
    DanglingBond,
}

/// Parse failure with the byte offset at which it was detected.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("SMILES error at position {position}: {kind}")]
pub struct SmilesError {
    pub position: usize,
    pub kind: SmilesErrorKind,
}

/// Bond symbol as written, before the default rule is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BondToken {
    Single,
    Double,
    Triple,
    Aromatic,
    /// `/` or `\`: accepted, treated as an unspecified single bond.
    Directional,
}

impl BondToken {
    fn resolve(self) -> Option<BondOrder> {
        match self {
            BondToken::Single => Some(BondOrder::Single),
            BondToken::Double => Some(BondOrder::Double),
            BondToken::Triple => Some(BondOrder::Triple),
            BondToken::Aromatic => Some(BondOrder::Aromatic),
            BondToken::Directional => None,
        }
    }
}

struct Parser<'a> {
    text: &'a [u8],
    pos: usize,
    atoms: Vec<Atom>,
    bonds: Vec<(usize, usize, BondOrder)>,
    open_rings: BTreeMap<u32, (usize, Option<BondToken>, usize)>,
    warned_stereo: bool,
}

/// Parses a single connected molecule.
///
/// Supported: organic-subset atoms (`B C N O P S F Cl Br I` and aromatic
/// `b c n o p s`), bracket atoms with element, optional chirality, H count
/// and charge, branches, ring closures (`1`–`9`, `%nn`) and bond symbols
/// `- = # :`. Stereo markers (`/ \ @`) are accepted and ignored.
pub fn parse_smiles(text: &str) -> Result<MolecularGraph, SmilesError> {
    if text.trim().is_empty() {
        return Err(SmilesError {
            position: 0,
            kind: SmilesErrorKind::Empty,
        });
    }
    let mut parser = Parser {
        text: text.as_bytes(),
        pos: 0,
        atoms: Vec::new(),
        bonds: Vec::new(),
        open_rings: BTreeMap::new(),
        warned_stereo: false,
    };
    parser.parse()?;

    let edges: Vec<(usize, usize)> = parser.bonds.iter().map(|&(u, v, _)| (u, v)).collect();
    let rings = ring_bonds(parser.atoms.len(), &edges);
    let bonds = parser
        .bonds
        .into_iter()
        .zip(rings)
        .map(|((u, v, order), in_ring)| Bond {
            endpoints: (u, v),
            order,
            in_ring,
        })
        .collect();
    Ok(MolecularGraph {
        atoms: parser.atoms,
        bonds,
        source_smiles: text.to_string(),
    })
}

impl<'a> Parser<'a> {
    fn err(&self, kind: SmilesErrorKind) -> SmilesError {
        SmilesError {
            position: self.pos,
            kind,
        }
    }

    fn peek(&self) -> Option<u8> {
        self.text.get(self.pos).copied()
    }

    fn stereo_ignored(&mut self) {
        if !self.warned_stereo {
            warn!(
                "ignoring stereochemistry in {:?}",
                String::from_utf8_lossy(self.text)
            );
            self.warned_stereo = true;
        }
    }

    fn parse(&mut self) -> Result<(), SmilesError> {
        // Stack of branch points; `prev` is the atom the next bond attaches to.
        let mut branch_stack: Vec<usize> = Vec::new();
        let mut prev: Option<usize> = None;
        let mut pending_bond: Option<(BondToken, usize)> = None;

        while let Some(c) = self.peek() {
            match c {
                b'(' => {
                    let Some(p) = prev else {
                        return Err(self.err(SmilesErrorKind::UnbalancedParen));
                    };
                    if pending_bond.is_some() {
                        return Err(self.err(SmilesErrorKind::DanglingBond));
                    }
                    branch_stack.push(p);
                    self.pos += 1;
                }
                b')' => {
                    let Some(p) = branch_stack.pop() else {
                        return Err(self.err(SmilesErrorKind::UnbalancedParen));
                    };
                    if pending_bond.is_some() {
                        return Err(self.err(SmilesErrorKind::DanglingBond));
                    }
                    if self.pos > 0 && self.text[self.pos - 1] == b'(' {
                        return Err(self.err(SmilesErrorKind::EmptyBranch));
                    }
                    prev = Some(p);
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' | b':' | b'/' | b'\\' => {
                    if prev.is_none() || pending_bond.is_some() {
                        return Err(self.err(SmilesErrorKind::DanglingBond));
                    }
                    let token = match c {
                        b'-' => BondToken::Single,
                        b'=' => BondToken::Double,
                        b'#' => BondToken::Triple,
                        b':' => BondToken::Aromatic,
                        _ => {
                            self.stereo_ignored();
                            BondToken::Directional
                        }
                    };
                    pending_bond = Some((token, self.pos));
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => {
                    let Some(p) = prev else {
                        return Err(self.err(SmilesErrorKind::ExpectedAtom));
                    };
                    let start = self.pos;
                    let label = self.ring_label()?;
                    let bond = pending_bond.take().map(|(t, _)| t);
                    self.ring_closure(p, label, bond, start)?;
                }
                b'.' => return Err(self.err(SmilesErrorKind::Disconnected)),
                _ => {
                    let atom_pos = self.pos;
                    let atom = self.atom()?;
                    let idx = self.atoms.len();
                    self.atoms.push(atom);
                    match prev {
                        Some(p) => {
                            let token = pending_bond.take().map(|(t, _)| t);
                            let order = self.bond_order(p, idx, token, atom_pos)?;
                            self.add_bond(p, idx, order, atom_pos)?;
                        }
                        None if pending_bond.is_some() => {
                            return Err(self.err(SmilesErrorKind::DanglingBond));
                        }
                        None => {}
                    }
                    prev = Some(idx);
                }
            }
        }

        if let Some((_, at)) = pending_bond {
            return Err(SmilesError {
                position: at,
                kind: SmilesErrorKind::DanglingBond,
            });
        }
        if !branch_stack.is_empty() {
            return Err(self.err(SmilesErrorKind::UnbalancedParen));
        }
        if let Some((&label, &(_, _, at))) = self.open_rings.iter().next() {
            return Err(SmilesError {
                position: at,
                kind: SmilesErrorKind::UnclosedRing(label),
            });
        }
        if self.atoms.is_empty() {
            return Err(self.err(SmilesErrorKind::ExpectedAtom));
        }
        Ok(())
    }

    fn ring_label(&mut self) -> Result<u32, SmilesError> {
        if self.peek() == Some(b'%') {
            self.pos += 1;
            let digits = self.text.get(self.pos..self.pos + 2);
            match digits {
                Some(d) if d.iter().all(u8::is_ascii_digit) => {
                    self.pos += 2;
                    Ok(((d[0] - b'0') * 10 + (d[1] - b'0')) as u32)
                }
                _ => Err(self.err(SmilesErrorKind::UnexpectedChar('%'))),
            }
        } else {
            let d = self.text[self.pos];
            self.pos += 1;
            Ok((d - b'0') as u32)
        }
    }

    fn ring_closure(
        &mut self,
        atom: usize,
        label: u32,
        bond: Option<BondToken>,
        at: usize,
    ) -> Result<(), SmilesError> {
        match self.open_rings.remove(&label) {
            None => {
                self.open_rings.insert(label, (atom, bond, at));
                Ok(())
            }
            Some((opener, open_bond, _)) => {
                if opener == atom {
                    return Err(SmilesError {
                        position: at,
                        kind: SmilesErrorKind::RingSelfLoop(label),
                    });
                }
                let token = match (open_bond, bond) {
                    (Some(a), Some(b)) if a.resolve() != b.resolve() => {
                        return Err(SmilesError {
                            position: at,
                            kind: SmilesErrorKind::RingBondMismatch(label),
                        });
                    }
                    (Some(a), _) => Some(a),
                    (None, b) => b,
                };
                let order = self.bond_order(opener, atom, token, at)?;
                self.add_bond(opener, atom, order, at)
            }
        }
    }

    fn bond_order(
        &self,
        u: usize,
        v: usize,
        token: Option<BondToken>,
        at: usize,
    ) -> Result<BondOrder, SmilesError> {
        let both_aromatic = self.atoms[u].aromatic && self.atoms[v].aromatic;
        match token.and_then(BondToken::resolve) {
            Some(BondOrder::Aromatic) if !both_aromatic => Err(SmilesError {
                position: at,
                kind: SmilesErrorKind::AromaticBondOnAliphatic,
            }),
            Some(order) => Ok(order),
            None if both_aromatic => Ok(BondOrder::Aromatic),
            None => Ok(BondOrder::Single),
        }
    }

    fn add_bond(
        &mut self,
        u: usize,
        v: usize,
        order: BondOrder,
        at: usize,
    ) -> Result<(), SmilesError> {
        let duplicate = self
            .bonds
            .iter()
            .any(|&(a, b, _)| (a == u && b == v) || (a == v && b == u));
        if duplicate {
            return Err(SmilesError {
                position: at,
                kind: SmilesErrorKind::DuplicateBond(u.min(v), u.max(v)),
            });
        }
        self.bonds.push((u, v, order));
        Ok(())
    }

    fn atom(&mut self) -> Result<Atom, SmilesError> {
        match self.peek() {
            Some(b'[') => self.bracket_atom(),
            Some(c) if c.is_ascii_alphabetic() => self.organic_atom(),
            Some(b'*') => Err(self.err(SmilesErrorKind::UnsupportedElement("*".into()))),
            Some(c) => Err(self.err(SmilesErrorKind::UnexpectedChar(c as char))),
            None => Err(self.err(SmilesErrorKind::ExpectedAtom)),
        }
    }

    fn organic_atom(&mut self) -> Result<Atom, SmilesError> {
        let rest = &self.text[self.pos..];
        let (element, aromatic, len) = match rest {
            [b'C', b'l', ..] => (Element::Cl, false, 2),
            [b'B', b'r', ..] => (Element::Br, false, 2),
            [b'B', ..] => (Element::B, false, 1),
            [b'C', ..] => (Element::C, false, 1),
            [b'N', ..] => (Element::N, false, 1),
            [b'O', ..] => (Element::O, false, 1),
            [b'P', ..] => (Element::P, false, 1),
            [b'S', ..] => (Element::S, false, 1),
            [b'F', ..] => (Element::F, false, 1),
            [b'I', ..] => (Element::I, false, 1),
            [b'b', ..] => (Element::B, true, 1),
            [b'c', ..] => (Element::C, true, 1),
            [b'n', ..] => (Element::N, true, 1),
            [b'o', ..] => (Element::O, true, 1),
            [b'p', ..] => (Element::P, true, 1),
            [b's', ..] => (Element::S, true, 1),
            [c, ..] => {
                return Err(self.err(SmilesErrorKind::UnsupportedElement(
                    (*c as char).to_string(),
                )))
            }
            [] => return Err(self.err(SmilesErrorKind::ExpectedAtom)),
        };
        self.pos += len;
        Ok(Atom {
            element,
            formal_charge: 0,
            aromatic,
            explicit_h: 0,
        })
    }

    fn bracket_atom(&mut self) -> Result<Atom, SmilesError> {
        let open = self.pos;
        let close = self.text[open..]
            .iter()
            .position(|&c| c == b']')
            .map(|i| open + i)
            .ok_or_else(|| self.err(SmilesErrorKind::UnclosedBracket))?;
        self.pos += 1;

        // isotope: accepted, not represented
        let iso_start = self.pos;
        while self.pos < close && self.text[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos > iso_start {
            warn!("ignoring isotope label in bracket atom");
        }

        let (element, aromatic) = self.bracket_symbol(close)?;

        // chirality
        while self.pos < close && self.text[self.pos] == b'@' {
            self.stereo_ignored();
            self.pos += 1;
        }

        let mut explicit_h = 0u32;
        if self.pos < close && self.text[self.pos] == b'H' {
            self.pos += 1;
            explicit_h = 1;
            let start = self.pos;
            while self.pos < close && self.text[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if self.pos > start {
                explicit_h = parse_digits(&self.text[start..self.pos]);
            }
            if explicit_h > 9 {
                return Err(SmilesError {
                    position: start,
                    kind: SmilesErrorKind::TooManyHydrogens(explicit_h),
                });
            }
        }

        let mut charge: i32 = 0;
        if self.pos < close && matches!(self.text[self.pos], b'+' | b'-') {
            let sign_char = self.text[self.pos];
            let sign = if sign_char == b'+' { 1 } else { -1 };
            self.pos += 1;
            let start = self.pos;
            while self.pos < close && self.text[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if self.pos > start {
                charge = sign * parse_digits(&self.text[start..self.pos]) as i32;
            } else {
                let mut magnitude = 1;
                while self.pos < close && self.text[self.pos] == sign_char {
                    magnitude += 1;
                    self.pos += 1;
                }
                charge = sign * magnitude;
            }
        }

        if self.pos != close {
            return Err(self.err(SmilesErrorKind::UnexpectedChar(
                self.text[self.pos] as char,
            )));
        }
        self.pos = close + 1;
        Ok(Atom {
            element,
            formal_charge: charge.clamp(i8::MIN as i32, i8::MAX as i32) as i8,
            aromatic,
            explicit_h: explicit_h as u8,
        })
    }

    fn bracket_symbol(&mut self, close: usize) -> Result<(Element, bool), SmilesError> {
        let rest = &self.text[self.pos..close];
        let take_two = rest.len() >= 2 && rest[1].is_ascii_lowercase();
        if let Some(&first) = rest.first() {
            if first.is_ascii_uppercase() {
                // Two-letter symbols first (Cl, Br, Si), then single letters.
                // Inside brackets an uppercase letter followed by a lowercase
                // one is always a two-letter symbol.
                let len = if take_two { 2 } else { 1 };
                let sym = String::from_utf8_lossy(&rest[..len]).into_owned();
                return match Element::from_symbol(&sym) {
                    Some(e) => {
                        self.pos += len;
                        Ok((e, false))
                    }
                    None => Err(self.err(SmilesErrorKind::UnsupportedElement(sym))),
                };
            }
            if first.is_ascii_lowercase() {
                let sym = (first.to_ascii_uppercase() as char).to_string();
                return match Element::from_symbol(&sym) {
                    Some(e) if e.can_be_aromatic() => {
                        self.pos += 1;
                        Ok((e, true))
                    }
                    _ => Err(self.err(SmilesErrorKind::UnsupportedElement(
                        (first as char).to_string(),
                    ))),
                };
            }
        }
        Err(self.err(SmilesErrorKind::ExpectedAtom))
    }
}

fn parse_digits(digits: &[u8]) -> u32 {
    digits
        .iter()
        .fold(0u32, |acc, d| acc.saturating_mul(10).saturating_add((d - b'0') as u32))
}
