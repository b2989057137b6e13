//! Session layout flags. Each flag is named after its `SessionConfig` field,
//! with a kebab-case alias for multi-word names.

use flowtrace_core::dataio::SessionConfig;

macro_rules! config_args {
    ($($field:ident : $ty:ty, [$($alias:literal),*], $help:literal;)*) => {
        #[derive(clap::Args, Debug, Default)]
        pub struct ConfigArgs {
            $(
                #[arg(
                    long = stringify!($field),
                    aliases = { let a: &[&'static str] = &[$($alias),*]; a.iter().copied() },
                    help = $help,
                    help_heading = "Session layout"
                )]
                pub $field: Option<$ty>,
            )*
        }

        impl ConfigArgs {
            /// Overrides the fields given on the command line.
            pub fn apply(&self, mut config: SessionConfig) -> SessionConfig {
                $(
                    if let Some(v) = self.$field {
                        config.$field = v.into();
                    }
                )*
                config
            }
        }
    };
}

config_args! {
    target_force: f64, ["target-force"], "Target force in N";
    band_width: f64, ["band-width"], "Fixed band width in N; measured by the staircase when absent";
    trial_duration: f64, ["trial-duration"], "Trial length in s";
    hold_duration: f64, ["hold-duration"], "Continuous in-band time needed for success, in s";
    rest_duration: f64, ["rest-duration"], "Pause between trials in s";
    press_threshold: f64, ["press-threshold"], "Force that counts as a press, in N";
    k1: f64, [], "Staircase trial-count step coefficient";
    k2: f64, [], "Staircase completion-time step coefficient";
    initial_band: f64, ["initial-band"], "Staircase starting band in N";
    skill_trials: usize, ["skill-trials"], "Minimum staircase trials";
    sessions: usize, [], "Main sessions";
    trials_per_session: usize, ["trials-per-session"], "Trials in each main session";
    probes_per_session: usize, ["probes-per-session"], "Flow probes in each main session";
    min_probe_gap: usize, ["min-probe-gap"], "Minimum trials between probes";
    probe_window: usize, ["probe-window"], "Trials summarised by each probe";
    sample_rate_hz: f64, ["sample-rate-hz"], "Trace sample rate in Hz";
}
