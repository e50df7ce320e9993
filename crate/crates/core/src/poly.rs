//! Multivariate polynomials with rational-integer structure, parsed from
//! strings such as `"e1*(1-e2)"` or `"x1^5*e3"`.
//!
//! Variables `x1..x4` occupy slots 0..4 and `e1..e6` slots 4..10.

use std::collections::BTreeMap;
use std::fmt;

pub const NVARS: usize = 10;
pub const ETA0: usize = 4;

pub type Exps = [u8; NVARS];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Poly {
    pub terms: BTreeMap<Exps, f64>,
}

impl Poly {
    pub fn zero() -> Self {
        Poly::default()
    }

    pub fn constant(c: f64) -> Self {
        let mut p = Poly::zero();
        if c != 0.0 {
            p.terms.insert([0; NVARS], c);
        }
        p
    }

    pub fn var(slot: usize) -> Self {
        let mut e = [0; NVARS];
        e[slot] = 1;
        let mut p = Poly::zero();
        p.terms.insert(e, 1.0);
        p
    }

    /// Variable `η_k` (1-based).
    pub fn eta(k: usize) -> Self {
        Poly::var(ETA0 + k - 1)
    }

    /// Variable `ξ_k` (1-based).
    pub fn xi(k: usize) -> Self {
        Poly::var(k - 1)
    }

    pub fn parse(s: &str) -> Result<Self, String> {
        let toks = tokenize(s)?;
        let mut p = Parser { toks, pos: 0 };
        let out = p.expr()?;
        if p.pos != p.toks.len() {
            return Err(format!("trailing input in {s:?}"));
        }
        Ok(out)
    }

    fn cleaned(mut self) -> Self {
        self.terms.retain(|_, c| *c != 0.0);
        self
    }

    pub fn add(&self, o: &Poly) -> Poly {
        let mut r = self.clone();
        for (e, c) in &o.terms {
            *r.terms.entry(*e).or_insert(0.0) += c;
        }
        r.cleaned()
    }

    pub fn neg(&self) -> Poly {
        Poly {
            terms: self.terms.iter().map(|(e, c)| (*e, -c)).collect(),
        }
    }

    pub fn sub(&self, o: &Poly) -> Poly {
        self.add(&o.neg())
    }

    pub fn mul(&self, o: &Poly) -> Poly {
        let mut r = Poly::zero();
        for (e1, c1) in &self.terms {
            for (e2, c2) in &o.terms {
                let mut e = [0; NVARS];
                for k in 0..NVARS {
                    e[k] = e1[k] + e2[k];
                }
                *r.terms.entry(e).or_insert(0.0) += c1 * c2;
            }
        }
        r.cleaned()
    }

    pub fn pow(&self, n: u32) -> Poly {
        let mut r = Poly::constant(1.0);
        for _ in 0..n {
            r = r.mul(self);
        }
        r
    }

    pub fn scale(&self, c: f64) -> Poly {
        Poly {
            terms: self.terms.iter().map(|(e, v)| (*e, v * c)).collect(),
        }
        .cleaned()
    }

    pub fn derivative(&self, slot: usize) -> Poly {
        let mut r = Poly::zero();
        for (e, c) in &self.terms {
            if e[slot] > 0 {
                let mut f = *e;
                f[slot] -= 1;
                *r.terms.entry(f).or_insert(0.0) += c * e[slot] as f64;
            }
        }
        r.cleaned()
    }

    /// Evaluates with `vars[k]` for slot `k`; missing slots count as zero.
    pub fn eval(&self, vars: &[f64]) -> f64 {
        let mut sum = 0.0;
        for (e, c) in &self.terms {
            let mut t = *c;
            for (k, &p) in e.iter().enumerate() {
                if p > 0 {
                    t *= vars.get(k).copied().unwrap_or(0.0).powi(p as i32);
                }
            }
            sum += t;
        }
        sum
    }

    /// Evaluates a polynomial in `η` only, `eta[k]` being `η_{k+1}`.
    pub fn eval_eta(&self, eta: &[f64]) -> f64 {
        let mut v = [0.0; NVARS];
        v[ETA0..ETA0 + eta.len()].copy_from_slice(eta);
        self.eval(&v)
    }

    /// Highest exponent of each slot.
    pub fn max_degrees(&self) -> Exps {
        let mut d = [0; NVARS];
        for e in self.terms.keys() {
            for k in 0..NVARS {
                d[k] = d[k].max(e[k]);
            }
        }
        d
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }
}

impl fmt::Display for Poly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (e, c) in &self.terms {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            write!(f, "{c}")?;
            for (k, &p) in e.iter().enumerate() {
                if p == 0 {
                    continue;
                }
                let name = if k < ETA0 {
                    format!("x{}", k + 1)
                } else {
                    format!("e{}", k - ETA0 + 1)
                };
                if p == 1 {
                    write!(f, "*{name}")?;
                } else {
                    write!(f, "*{name}^{p}")?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Var(usize),
    Op(char),
}

fn tokenize(s: &str) -> Result<Vec<Tok>, String> {
    let chars: Vec<char> = s.chars().filter(|c| !c.is_whitespace()).collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            let t: String = chars[start..i].iter().collect();
            out.push(Tok::Num(t.parse().map_err(|_| format!("bad number {t}"))?));
        } else if c == 'e' || c == 'x' {
            i += 1;
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let t: String = chars[start..i].iter().collect();
            let k: usize = t.parse().map_err(|_| format!("bad variable index in {s:?}"))?;
            let slot = match c {
                'x' if (1..=ETA0).contains(&k) => k - 1,
                'e' if (1..=NVARS - ETA0).contains(&k) => ETA0 + k - 1,
                _ => return Err(format!("variable {c}{k} out of range")),
            };
            out.push(Tok::Var(slot));
        } else if "+-*^()".contains(c) {
            out.push(Tok::Op(c));
            i += 1;
        } else {
            return Err(format!("unexpected character {c:?} in {s:?}"));
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn expr(&mut self) -> Result<Poly, String> {
        let mut acc = self.term()?;
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let t = self.term()?;
            acc = if c == '+' { acc.add(&t) } else { acc.sub(&t) };
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<Poly, String> {
        let mut acc = self.unary()?;
        while let Some(Tok::Op('*')) = self.peek() {
            self.pos += 1;
            acc = acc.mul(&self.unary()?);
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<Poly, String> {
        if let Some(Tok::Op('-')) = self.peek() {
            self.pos += 1;
            return Ok(self.unary()?.neg());
        }
        self.power()
    }

    fn power(&mut self) -> Result<Poly, String> {
        let base = self.atom()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            match self.peek().cloned() {
                Some(Tok::Num(n)) if n.fract() == 0.0 && n >= 0.0 => {
                    self.pos += 1;
                    return Ok(base.pow(n as u32));
                }
                _ => return Err("exponent must be a nonnegative integer".into()),
            }
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Poly, String> {
        match self.peek().cloned() {
            Some(Tok::Num(n)) => {
                self.pos += 1;
                Ok(Poly::constant(n))
            }
            Some(Tok::Var(k)) => {
                self.pos += 1;
                Ok(Poly::var(k))
            }
            Some(Tok::Op('(')) => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(&Tok::Op(')')) {
                    return Err("missing ')'".into());
                }
                self.pos += 1;
                Ok(e)
            }
            t => Err(format!("unexpected token {t:?}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_eval() {
        let p = Poly::parse("e1*(1-e2)").unwrap();
        assert_eq!(p.eval_eta(&[0.5, 0.25]), 0.375);
        let q = Poly::parse("-e1*e2*e3 + 1").unwrap();
        assert_eq!(q.eval_eta(&[0.5, 0.5, 0.5]), 0.875);
        let r = Poly::parse("x1^5*x2^4").unwrap();
        assert_eq!(r.eval(&[0.5, 2.0]), 0.5);
        assert!(Poly::parse("e0").is_err());
        assert!(Poly::parse("e1*(1-e2").is_err());
        assert!(Poly::parse("0").unwrap().is_zero());
    }

    #[test]
    fn derivative_rules() {
        let p = Poly::parse("e1^2*e2 - 3*e2").unwrap();
        let d = p.derivative(ETA0);
        assert_eq!(d, Poly::parse("2*e1*e2").unwrap());
        let d2 = p.derivative(ETA0 + 1);
        assert_eq!(d2, Poly::parse("e1^2-3").unwrap());
    }
}
