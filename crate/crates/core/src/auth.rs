use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Anonymous,
    Privileged,
    Admin,
}

impl Role {
    /// Privileged and admin tokens skip the anonymous node/duration limits.
    pub fn bypasses_limits(self) -> bool {
        self != Role::Anonymous
    }

    pub fn parse(s: &str) -> Option<Role> {
        match s.to_ascii_lowercase().as_str() {
            "anonymous" => Some(Role::Anonymous),
            "privileged" => Some(Role::Privileged),
            "admin" => Some(Role::Admin),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    /// 128-bit value, lowercase hex.
    pub value: String,
    pub role: Role,
    pub issued_at_tick: u64,
}

/// Who is acting on a block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    Admin,
    User(String),
}
