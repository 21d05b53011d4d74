//! Topic filters with MQTT `+` / `#` wildcards.

use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FilterError {
    #[error("empty topic level at position {0}")]
    EmptyLevel(usize),
    #[error("'#' must be the last level")]
    HashNotLast,
    #[error("wildcard characters must occupy a whole level")]
    PartialWildcard,
    #[error("wildcards are not allowed in topic names")]
    WildcardInTopic,
    #[error("topic too long")]
    TooLong,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Segment {
    Literal(String),
    Plus,
    Hash,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TopicFilter {
    raw: String,
    segments: Vec<Segment>,
}

impl TopicFilter {
    pub fn parse(s: &str) -> Result<Self, FilterError> {
        if s.len() > u16::MAX as usize {
            return Err(FilterError::TooLong);
        }
        let levels: Vec<&str> = s.split('/').collect();
        let mut segments = Vec::with_capacity(levels.len());
        for (i, level) in levels.iter().enumerate() {
            let seg = match *level {
                "" => return Err(FilterError::EmptyLevel(i)),
                "+" => Segment::Plus,
                "#" if i + 1 == levels.len() => Segment::Hash,
                "#" => return Err(FilterError::HashNotLast),
                l if l.contains(['+', '#']) => return Err(FilterError::PartialWildcard),
                l => Segment::Literal(l.to_owned()),
            };
            segments.push(seg);
        }
        Ok(TopicFilter {
            raw: s.to_owned(),
            segments,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn matches(&self, topic: &str) -> bool {
        let mut levels = topic.split('/');
        for seg in &self.segments {
            match seg {
                Segment::Hash => return true,
                Segment::Plus => {
                    if levels.next().is_none() {
                        return false;
                    }
                }
                Segment::Literal(lit) => match levels.next() {
                    Some(l) if l == lit => {}
                    _ => return false,
                },
            }
        }
        levels.next().is_none()
    }
}

impl FromStr for TopicFilter {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TopicFilter::parse(s)
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

/// Checks a PUBLISH topic name: nonempty levels, no wildcards.
pub fn validate_topic_name(topic: &str) -> Result<(), FilterError> {
    if topic.len() > u16::MAX as usize {
        return Err(FilterError::TooLong);
    }
    for (i, level) in topic.split('/').enumerate() {
        if level.is_empty() {
            return Err(FilterError::EmptyLevel(i));
        }
        if level.contains(['+', '#']) {
            return Err(FilterError::WildcardInTopic);
        }
    }
    Ok(())
}

/// Convenience wrapper used by callers holding raw strings.
pub fn match_topic(filter: &TopicFilter, topic: &str) -> bool {
    filter.matches(topic)
}
