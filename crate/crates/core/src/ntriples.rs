//! A small N-Triples reader (IRIs, plain and typed literals, comments) and a
//! synthetic sensor-observation dataset generator used by the experiments.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NtError {
    #[error("line {0}: expected subject IRI")]
    BadSubject(usize),
    #[error("line {0}: expected predicate IRI")]
    BadPredicate(usize),
    #[error("line {0}: expected object term")]
    BadObject(usize),
    #[error("line {0}: missing terminating '.'")]
    MissingDot(usize),
    #[error("line {0}: unterminated {1}")]
    Unterminated(usize, &'static str),
}

/// Parse N-Triples text into `(subject, predicate, object)` strings. Terms
/// keep their surface syntax (`<...>` for IRIs, `"..."` for literals) so the
/// dictionary stores them verbatim.
pub fn parse(text: &str) -> Result<Vec<(String, String, String)>, NtError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut rest = line;
        let s = take_iri(&mut rest, lineno).map_err(|_| NtError::BadSubject(lineno))?;
        let p = take_iri(&mut rest, lineno).map_err(|_| NtError::BadPredicate(lineno))?;
        let o = take_term(&mut rest, lineno)?;
        let rest = rest.trim_start();
        if !rest.starts_with('.') {
            return Err(NtError::MissingDot(lineno));
        }
        out.push((s, p, o));
    }
    Ok(out)
}

fn take_iri(rest: &mut &str, lineno: usize) -> Result<String, NtError> {
    let s = rest.trim_start();
    if !s.starts_with('<') {
        return Err(NtError::BadSubject(lineno));
    }
    let end = s
        .find('>')
        .ok_or(NtError::Unterminated(lineno, "IRI"))?;
    let term = s[..=end].to_owned();
    *rest = &s[end + 1..];
    Ok(term)
}

fn take_term(rest: &mut &str, lineno: usize) -> Result<String, NtError> {
    let s = rest.trim_start();
    if s.starts_with('<') {
        return take_iri(rest, lineno);
    }
    if !s.starts_with('"') {
        return Err(NtError::BadObject(lineno));
    }
    // find the closing quote, honouring backslash escapes
    let bytes = s.as_bytes();
    let mut i = 1;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => i += 2,
            b'"' => break,
            _ => i += 1,
        }
    }
    if i >= bytes.len() {
        return Err(NtError::Unterminated(lineno, "literal"));
    }
    let mut end = i + 1;
    // optional datatype or language tag
    let tail = &s[end..];
    if let Some(t) = tail.strip_prefix("^^") {
        let close = t.find('>').ok_or(NtError::Unterminated(lineno, "datatype"))?;
        end += 2 + close + 1;
    } else if tail.starts_with('@') {
        let stop = tail
            .find(|c: char| c.is_whitespace() || c == '.')
            .unwrap_or(tail.len());
        end += stop;
    }
    let term = s[..end].to_owned();
    *rest = &s[end..];
    Ok(term)
}

/// Serialise triples back to N-Triples lines.
pub fn format(triples: &[(String, String, String)]) -> String {
    let mut out = String::new();
    for (s, p, o) in triples {
        out.push_str(s);
        out.push(' ');
        out.push_str(p);
        out.push(' ');
        out.push_str(o);
        out.push_str(" .\n");
    }
    out
}

pub const RDF_TYPE: &str = "<http://www.w3.org/1999/02/22-rdf-syntax-ns#type>";
pub const OBSERVATION_CLASS: &str = "<http://www.w3.org/ns/sosa/Observation>";

const NS: &str = "http://example.org/sensors";

/// Number of triples emitted per observation record: seven observation
/// nodes of twelve triples each, plus three station triples.
pub const TRIPLES_PER_RECORD: usize = 87;
/// Observation nodes per record; this is also the count of `rdf:type`
/// triples, about eight percent of the record.
pub const OBSERVATIONS_PER_RECORD: usize = 7;

/// Generate a synthetic weather-station dataset of `observations`
/// observation records spread over `stations` stations. Each record
/// describes one station reporting seven observed properties; values are
/// drawn from `rng` so datasets differ per seed while the shape is fixed.
pub fn generate(stations: usize, observations: usize, seed: u64) -> Vec<(String, String, String)> {
    let records = observations;
    let stations = stations.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(records * TRIPLES_PER_RECORD);
    let properties = [
        "airTemperature",
        "dewPoint",
        "windSpeed",
        "windDirection",
        "barometricPressure",
        "relativeHumidity",
        "precipitation",
    ];
    for r in 0..records {
        let station = format!("<{NS}/station/{}>", r % stations);
        let record = format!("<{NS}/record/{r}>");
        out.push((
            station.clone(),
            format!("<{NS}/vocab#hasRecord>"),
            record.clone(),
        ));
        out.push((
            station.clone(),
            format!("<{NS}/vocab#locatedAt>"),
            format!("\"{:.4} {:.4}\"", rng.gen_range(-90.0..90.0), rng.gen_range(-180.0..180.0)),
        ));
        out.push((
            station.clone(),
            format!("<{NS}/vocab#elevation>"),
            format!("\"{}\"", rng.gen_range(0..4000)),
        ));
        for (k, prop) in properties.iter().enumerate() {
            let obs = format!("<{NS}/obs/{r}-{k}>");
            out.push((obs.clone(), RDF_TYPE.into(), OBSERVATION_CLASS.into()));
            out.push((
                obs.clone(),
                "<http://www.w3.org/ns/sosa/observedProperty>".into(),
                format!("<{NS}/prop/{prop}>"),
            ));
            out.push((
                obs.clone(),
                "<http://www.w3.org/ns/sosa/madeBySensor>".into(),
                format!("<{NS}/sensor/{}-{k}>", r % stations),
            ));
            out.push((
                obs.clone(),
                "<http://www.w3.org/ns/sosa/hasFeatureOfInterest>".into(),
                station.clone(),
            ));
            out.push((
                obs.clone(),
                "<http://www.w3.org/ns/sosa/hasSimpleResult>".into(),
                format!("\"{:.2}\"", rng.gen_range(-50.0..150.0)),
            ));
            out.push((
                obs.clone(),
                "<http://www.w3.org/ns/sosa/resultTime>".into(),
                format!(
                    "\"2023-{:02}-{:02}T{:02}:00:00Z\"",
                    rng.gen_range(1..13),
                    rng.gen_range(1..29),
                    rng.gen_range(0..24)
                ),
            ));
            out.push((
                obs.clone(),
                "<http://www.w3.org/ns/sosa/phenomenonTime>".into(),
                format!("<{NS}/time/{r}-{k}>"),
            ));
            out.push((
                obs.clone(),
                "<http://www.w3.org/ns/sosa/usedProcedure>".into(),
                format!("<{NS}/procedure/{}>", k),
            ));
            out.push((
                obs.clone(),
                format!("<{NS}/vocab#qualityFlag>"),
                format!("\"{}\"", rng.gen_range(0..5)),
            ));
            out.push((
                obs.clone(),
                format!("<{NS}/vocab#partOfRecord>"),
                record.clone(),
            ));
            out.push((
                obs.clone(),
                format!("<{NS}/vocab#sequenceNumber>"),
                format!("\"{k}\""),
            ));
            out.push((
                obs.clone(),
                format!("<{NS}/vocab#uncertainty>"),
                format!("\"{:.3}\"", rng.gen_range(0.0..1.0)),
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_iris_and_literals() {
        let text = "\
# a comment
<http://a> <http://p> <http://b> .

<http://a> <http://p> \"plain\" .
<http://a> <http://p> \"esc \\\" quote\" .
<http://a> <http://p> \"3.2\"^^<http://www.w3.org/2001/XMLSchema#float> .
<http://a> <http://p> \"hi\"@en .
";
        let ts = parse(text).unwrap();
        assert_eq!(ts.len(), 5);
        assert_eq!(ts[0].2, "<http://b>");
        assert_eq!(ts[1].2, "\"plain\"");
        assert_eq!(ts[2].2, "\"esc \\\" quote\"");
        assert_eq!(ts[3].2, "\"3.2\"^^<http://www.w3.org/2001/XMLSchema#float>");
        assert_eq!(ts[4].2, "\"hi\"@en");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        assert_eq!(parse("<a> <p>\n"), Err(NtError::BadObject(1)));
        assert_eq!(parse("\n\nnot a triple .\n"), Err(NtError::BadSubject(3)));
        assert_eq!(
            parse("<a> <p> <b>\n"),
            Err(NtError::MissingDot(1))
        );
    }

    #[test]
    fn roundtrips_through_format() {
        let ts = generate(2, 3, 9);
        let again = parse(&format(&ts)).unwrap();
        assert_eq!(ts, again);
    }

    #[test]
    fn record_shape_is_fixed() {
        let ts = generate(5, 10, 1);
        assert_eq!(ts.len(), 10 * TRIPLES_PER_RECORD);
        let types = ts.iter().filter(|(_, p, _)| p == RDF_TYPE).count();
        assert_eq!(types, 10 * OBSERVATIONS_PER_RECORD);
        // rdf:type triples are about eight percent of the dataset
        let share = types as f64 / ts.len() as f64;
        assert!((share - 0.08).abs() < 0.003, "share {share}");
    }

    #[test]
    fn distinct_seeds_distinct_values() {
        assert_ne!(generate(1, 2, 1), generate(1, 2, 2));
    }
}
