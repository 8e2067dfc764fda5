use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDate;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptionRight {
    Call,
    Put,
}

impl OptionRight {
    pub fn code(self) -> &'static str {
        match self {
            OptionRight::Call => "C",
            OptionRight::Put => "P",
        }
    }
}

/// One end-of-day option quote.
#[derive(Debug, Clone, PartialEq)]
pub struct OptionQuote {
    pub quote_date: NaiveDate,
    pub spot: f64,
    pub strike: f64,
    /// Time to expiry in years.
    pub expiry: f64,
    pub right: OptionRight,
    pub mid_price: f64,
    /// Continuously-compounded annual rate.
    pub rate: f64,
}

impl OptionQuote {
    /// Log-moneyness `ln(K / S)`.
    pub fn log_moneyness(&self) -> f64 {
        (self.strike / self.spot).ln()
    }
}

const CHAIN_HEADER: [&str; 7] = [
    "quote_date",
    "spot",
    "rate",
    "strike",
    "expiry_years",
    "right",
    "mid_price",
];

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Reads a chain CSV (`quote_date,spot,rate,strike,expiry_years,right,mid_price`)
/// and groups the quotes by date.
pub fn read_chain_csv<R: Read>(reader: R) -> Result<BTreeMap<NaiveDate, Vec<OptionQuote>>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if headers.iter().ne(CHAIN_HEADER.iter().copied()) {
        return Err(parse_err(
            1,
            format!("expected header `{}`, found `{}`", CHAIN_HEADER.join(","), headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut out: BTreeMap<NaiveDate, Vec<OptionQuote>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64> {
            let field = &record[i];
            field
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| parse_err(line, format!("column `{}`: invalid number `{field}`", CHAIN_HEADER[i])))
        };
        let quote_date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d")
            .map_err(|e| parse_err(line, format!("quote_date `{}`: {e}", &record[0])))?;
        let right = match &record[5] {
            "C" | "c" => OptionRight::Call,
            "P" | "p" => OptionRight::Put,
            other => return Err(parse_err(line, format!("right must be C or P, found `{other}`"))),
        };
        let quote = OptionQuote {
            quote_date,
            spot: num(1)?,
            rate: num(2)?,
            strike: num(3)?,
            expiry: num(4)?,
            right,
            mid_price: num(6)?,
        };
        if quote.spot <= 0.0 || quote.strike <= 0.0 || quote.expiry <= 0.0 || quote.mid_price < 0.0 {
            return Err(parse_err(line, "spot, strike, expiry must be > 0 and mid_price >= 0"));
        }
        out.entry(quote_date).or_default().push(quote);
    }
    Ok(out)
}

pub fn write_chain_csv<W: Write>(writer: W, quotes: &[OptionQuote]) -> Result<()> {
    let mut w = std::io::BufWriter::new(writer);
    writeln!(w, "{}", CHAIN_HEADER.join(","))?;
    for q in quotes {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            q.quote_date.format("%Y-%m-%d"),
            q.spot,
            q.rate,
            q.strike,
            q.expiry,
            q.right.code(),
            q.mid_price
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_groups_by_date() {
        let text = "quote_date,spot,rate,strike,expiry_years,right,mid_price\n\
                    2020-03-10,100,0.01,95,0.25,P,1.5\n\
                    2020-03-11,101,0.01,105,0.5,C,2.0\n\
                    2020-03-10,100,0.01,105,0.25,C,1.2\n";
        let chains = read_chain_csv(text.as_bytes()).unwrap();
        assert_eq!(chains.len(), 2);
        let first = &chains[&NaiveDate::from_ymd_opt(2020, 3, 10).unwrap()];
        assert_eq!(first.len(), 2);
        assert_eq!(first[0].right, OptionRight::Put);
        assert!((first[1].log_moneyness() - (1.05f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "quote_date,spot,rate,strike,expiry_years,right,mid_price\n\
                    2020-03-10,100,0.01,95,0.25,P,1.5\n\
                    2020-03-10,100,0.01,abc,0.25,C,1.2\n";
        match read_chain_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let bad_right = "quote_date,spot,rate,strike,expiry_years,right,mid_price\n2020-03-10,100,0.01,95,0.25,X,1.5\n";
        assert!(matches!(read_chain_csv(bad_right.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn wrong_header_is_rejected() {
        let text = "date,spot\n2020-03-10,100\n";
        assert!(matches!(read_chain_csv(text.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn write_then_read() {
        let q = OptionQuote {
            quote_date: NaiveDate::from_ymd_opt(2019, 1, 2).unwrap(),
            spot: 2500.0,
            strike: 2400.0,
            expiry: 0.3,
            right: OptionRight::Put,
            mid_price: 51.25,
            rate: 0.021,
        };
        let mut buf = Vec::new();
        write_chain_csv(&mut buf, &[q.clone()]).unwrap();
        let back = read_chain_csv(buf.as_slice()).unwrap();
        assert_eq!(back[&q.quote_date], vec![q]);
    }
}
