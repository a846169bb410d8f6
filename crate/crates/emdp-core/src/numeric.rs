//! Exact number types and small helpers shared across the crate.
//!
//! All quantities in the pipeline are arbitrary-precision: counter updates are
//! [`Int`], rewards and probabilities are [`Rat`]. Nothing in the analysis path
//! ever touches floating point; `f64` appears only in simulation reports.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub type Int = BigInt;
pub type Rat = BigRational;

pub fn int(v: i64) -> Int {
    Int::from(v)
}

pub fn rat(num: i64, den: i64) -> Rat {
    Rat::new(Int::from(num), Int::from(den))
}

pub fn rat_int(v: i64) -> Rat {
    Rat::from_integer(Int::from(v))
}

/// Parses `a/b` or an integer literal into a rational.
pub fn parse_rat(text: &str) -> Result<Rat, String> {
    let mut parts = text.splitn(2, '/');
    let num_text = parts.next().unwrap_or("");
    let num: Int = num_text
        .parse()
        .map_err(|_| format!("invalid integer `{num_text}`"))?;
    match parts.next() {
        None => Ok(Rat::from_integer(num)),
        Some(den_text) => {
            let den: Int = den_text
                .parse()
                .map_err(|_| format!("invalid integer `{den_text}`"))?;
            if den.is_zero() {
                return Err("zero denominator".into());
            }
            Ok(Rat::new(num, den))
        }
    }
}

/// Renders a rational as `a/b`, or just `a` when the denominator is 1.
pub fn format_rat(r: &Rat) -> String {
    if r.denom().is_one() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

/// Smallest non-negative integer `m` with `m^4 >= k^3`, i.e. `ceil(k^(3/4))`
/// for a non-negative integer `k`.
pub fn ceil_pow_three_quarters(k: &Int) -> Int {
    assert!(!k.is_negative(), "negative argument");
    let cube = k * k * k;
    let root = num_integer::Roots::nth_root(&cube, 4);
    if &root * &root * &root * &root >= cube {
        root
    } else {
        root + 1
    }
}

/// Smallest positive integer `n` such that `n * r` is an integer for every
/// rational in `rs`. Equals the lcm of the denominators.
pub fn common_denominator<'a>(rs: impl IntoIterator<Item = &'a Rat>) -> Int {
    let mut acc = Int::one();
    for r in rs {
        acc = num_integer::lcm(acc, r.denom().clone());
    }
    acc
}

/// Serde adapter: arbitrary-precision integers as decimal strings.
pub mod int_serde {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Int, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Int, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(|_| D::Error::custom("invalid integer"))
    }
}

/// Serde adapter: rationals as `{ "num": "...", "den": "..." }` with decimal
/// string components, the JSON form used by every external interface.
pub mod rat_serde {
    use super::*;

    #[derive(Serialize, Deserialize)]
    struct Repr {
        num: String,
        den: String,
    }

    pub fn serialize<S: Serializer>(v: &Rat, s: S) -> Result<S::Ok, S::Error> {
        Repr {
            num: v.numer().to_string(),
            den: v.denom().to_string(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rat, D::Error> {
        let repr = Repr::deserialize(d)?;
        let num: Int = repr.num.parse().map_err(|_| D::Error::custom("invalid numerator"))?;
        let den: Int = repr.den.parse().map_err(|_| D::Error::custom("invalid denominator"))?;
        if den.is_zero() {
            return Err(D::Error::custom("zero denominator"));
        }
        Ok(Rat::new(num, den))
    }
}

/// JSON value for a rational in the `{num, den}` convention.
pub fn rat_json(r: &Rat) -> serde_json::Value {
    serde_json::json!({ "num": r.numer().to_string(), "den": r.denom().to_string() })
}
