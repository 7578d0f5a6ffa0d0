/// Enum with a fixed snake_case text form, usable as a config value.
macro_rules! string_enum {
    (
        $(#[$meta:meta])*
        $vis:vis enum $name:ident { $( $(#[$vmeta:meta])* $variant:ident => $text:literal ),+ $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        $vis enum $name { $( $(#[$vmeta])* $variant ),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl ::std::fmt::Display for $name {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl ::std::str::FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s.trim() {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "expected one of [{}], got `{other}`",
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

/// Config section: a struct of `FromStr + Display` fields with defaults and
/// flat `section.key` accessors.
macro_rules! config_section {
    (
        $(#[$meta:meta])*
        $vis:vis struct $name:ident ($section:literal) {
            $( $(#[$fmeta:meta])* $field:ident : $ty:ty = $default:expr ),+ $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        $vis struct $name { $( $(#[$fmeta])* pub $field: $ty ),+ }

        impl Default for $name {
            fn default() -> Self {
                Self { $( $field: $default ),+ }
            }
        }

        impl $name {
            pub const SECTION: &'static str = $section;
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),+];

            /// Sets one key of this section; `Ok(false)` if the key is unknown.
            pub fn set(&mut self, key: &str, value: &str) -> Result<bool, $crate::error::ConfigError> {
                match key {
                    $(stringify!($field) => {
                        self.$field = value.trim().parse::<$ty>().map_err(|e| {
                            $crate::error::ConfigError::Parse {
                                key: format!("{}.{}", $section, key),
                                value: value.to_string(),
                                reason: e.to_string(),
                            }
                        })?;
                        Ok(true)
                    })+
                    _ => Ok(false),
                }
            }

            pub fn entries(&self) -> Vec<(String, String)> {
                vec![$( (format!("{}.{}", $section, stringify!($field)), self.$field.to_string()) ),+]
            }
        }
    };
}
