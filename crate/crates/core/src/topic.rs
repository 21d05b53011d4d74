//! Topic grammar. A rendered topic identifies the producing transducer
//! channel, so the topic plus its descriptor plays the role of the TIM.
//!
//! ```text
//! dsm/v1/<site>/<node_id>/<channel>/<kind>
//! ```
//!
//! `cmd` and `sync` are node-scoped and always use the channel token `_node`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::is_valid_token;

pub const TOPIC_ROOT: &str = "dsm";
pub const TOPIC_VERSION: &str = "v1";
/// Channel token used for node-scoped topics.
pub const NODE_CHANNEL: &str = "_node";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopicKind {
    Raw,
    Features,
    Events,
    Cmd,
    Sync,
}

impl TopicKind {
    pub const ALL: [TopicKind; 5] = [
        TopicKind::Raw,
        TopicKind::Features,
        TopicKind::Events,
        TopicKind::Cmd,
        TopicKind::Sync,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TopicKind::Raw => "raw",
            TopicKind::Features => "features",
            TopicKind::Events => "events",
            TopicKind::Cmd => "cmd",
            TopicKind::Sync => "sync",
        }
    }

    pub fn is_node_scoped(self) -> bool {
        matches!(self, TopicKind::Cmd | TopicKind::Sync)
    }
}

impl FromStr for TopicKind {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        TopicKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or(())
    }
}

/// Segment of a topic string that failed to parse or validate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenPosition {
    Root,
    Version,
    Site,
    Node,
    Channel,
    Kind,
    /// Wrong number of levels.
    Length,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TopicError {
    #[error("bad topic token at {0:?}")]
    BadToken(TokenPosition),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TopicPath {
    site: String,
    node_id: String,
    channel: String,
    kind: TopicKind,
}

impl TopicPath {
    pub fn site(&self) -> &str {
        &self.site
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn channel(&self) -> &str {
        &self.channel
    }

    pub fn kind(&self) -> TopicKind {
        self.kind
    }

    /// Same site/node/channel, different kind. Switching between a
    /// node-scoped and a channel-scoped kind rewrites the channel token.
    pub fn with_kind(&self, kind: TopicKind, channel_if_needed: &str) -> Result<Self, TopicError> {
        let channel = match (self.kind.is_node_scoped(), kind.is_node_scoped()) {
            (false, true) => NODE_CHANNEL,
            (true, false) => channel_if_needed,
            _ => &self.channel,
        };
        build_topic(&self.site, &self.node_id, channel, kind)
    }

    /// Node-scoped topic of the given kind for `site`/`node_id`.
    pub fn node(site: &str, node_id: &str, kind: TopicKind) -> Result<Self, TopicError> {
        build_topic(site, node_id, NODE_CHANNEL, kind)
    }

    pub fn render(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for TopicPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{TOPIC_ROOT}/{TOPIC_VERSION}/{}/{}/{}/{}",
            self.site,
            self.node_id,
            self.channel,
            self.kind.as_str()
        )
    }
}

pub fn build_topic(
    site: &str,
    node_id: &str,
    channel: &str,
    kind: TopicKind,
) -> Result<TopicPath, TopicError> {
    use TokenPosition::*;
    if !is_valid_token(site) {
        return Err(TopicError::BadToken(Site));
    }
    if !is_valid_token(node_id) {
        return Err(TopicError::BadToken(Node));
    }
    if !is_valid_token(channel) {
        return Err(TopicError::BadToken(Channel));
    }
    // Node-scoped kinds require `_node`; per-channel data kinds may not use it.
    // Events may be either (channel events or node acks).
    let node_scoped_channel = channel == NODE_CHANNEL;
    match kind {
        TopicKind::Cmd | TopicKind::Sync if !node_scoped_channel => {
            return Err(TopicError::BadToken(Channel))
        }
        TopicKind::Raw | TopicKind::Features if node_scoped_channel => {
            return Err(TopicError::BadToken(Channel))
        }
        _ => {}
    }
    Ok(TopicPath {
        site: site.to_owned(),
        node_id: node_id.to_owned(),
        channel: channel.to_owned(),
        kind,
    })
}

pub fn parse_topic(s: &str) -> Result<TopicPath, TopicError> {
    use TokenPosition::*;
    let parts: Vec<&str> = s.split('/').collect();
    if parts.first() != Some(&TOPIC_ROOT) {
        return Err(TopicError::BadToken(Root));
    }
    if parts.get(1) != Some(&TOPIC_VERSION) {
        return Err(TopicError::BadToken(Version));
    }
    if parts.len() != 6 {
        return Err(TopicError::BadToken(Length));
    }
    let kind: TopicKind = parts[5].parse().map_err(|_| TopicError::BadToken(Kind))?;
    build_topic(parts[2], parts[3], parts[4], kind)
}

impl FromStr for TopicPath {
    type Err = TopicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_topic(s)
    }
}

impl Serialize for TopicPath {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TopicPath {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_topic(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn renders_features_topic() {
        let t = build_topic("plant1", "node07", "vib_head_x", TopicKind::Features).unwrap();
        assert_eq!(t.render(), "dsm/v1/plant1/node07/vib_head_x/features");
    }

    #[test]
    fn parses_node_scoped_cmd() {
        let t = parse_topic("dsm/v1/plant1/node07/_node/cmd").unwrap();
        assert_eq!(t.kind(), TopicKind::Cmd);
        assert_eq!(t.channel(), "_node");
    }

    #[test]
    fn rejects_other_versions() {
        assert_eq!(
            parse_topic("dsm/v2/plant1/node07/x/raw"),
            Err(TopicError::BadToken(TokenPosition::Version))
        );
        assert_eq!(
            parse_topic("mqtt/v1/plant1/node07/x/raw"),
            Err(TopicError::BadToken(TokenPosition::Root))
        );
    }

    #[test]
    fn rejects_malformed_tokens() {
        use TokenPosition::*;
        let cases = [
            ("dsm/v1/Plant/n/c/raw", Site),
            ("dsm/v1/p//c/raw", Node),
            ("dsm/v1/p/n/c/raws", Kind),
            ("dsm/v1/p/n/c/raw/extra", Length),
            ("dsm/v1/p/n/c", Length),
            ("dsm/v1/p/n/chan/cmd", Channel),
            ("dsm/v1/p/n/_node/raw", Channel),
            ("dsm/v1/p/n/c+/raw", Channel),
        ];
        for (s, pos) in cases {
            assert_eq!(parse_topic(s), Err(TopicError::BadToken(pos)), "{s}");
        }
        let long = "a".repeat(33);
        assert!(build_topic(&long, "n", "c", TopicKind::Raw).is_err());
    }

    fn token() -> impl Strategy<Value = String> {
        "[a-z0-9_-]{1,32}".prop_filter("reserved", |s| s != NODE_CHANNEL)
    }

    proptest! {
        #[test]
        fn render_parse_inverse(site in token(), node in token(), ch in token(), k in 0usize..5) {
            let kind = TopicKind::ALL[k];
            let ch = if kind.is_node_scoped() { NODE_CHANNEL.to_owned() } else { ch };
            let t = build_topic(&site, &node, &ch, kind).unwrap();
            let parsed = parse_topic(&t.render()).unwrap();
            prop_assert_eq!(&parsed, &t);
            prop_assert_eq!(parsed.render(), t.render());
        }

        #[test]
        fn parse_only_accepts_rendered_forms(s in "[a-z0-9_/+#-]{0,60}") {
            if let Ok(t) = parse_topic(&s) {
                prop_assert_eq!(t.render(), s);
            }
        }
    }
}
